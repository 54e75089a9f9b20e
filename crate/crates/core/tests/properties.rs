//! Randomized invariants of the partitioner, slot mapping and fabric.

use std::thread;

use hybridnet::fabric::{Fabric, OpDesc, Phase};
use hybridnet::net::{ForwardCtx, Layer, LayerKind, LayerSpec, Linear};
use hybridnet::partition::{partition_network, split_linear, PartitionConfig};
use hybridnet::runtime::modulo_slot_owner;
use hybridnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn group_sizes() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 3, 4])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shards_reassemble_the_layer(k in group_sizes(), m in 1usize..6, in_dim in 1usize..9, b in 1usize..4, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = k * m;
        let full = Linear::<f64>::new(in_dim, out, &mut rng);
        let x = Tensor::<f64>::random_uniform(vec![b, in_dim], -1.0, 1.0, &mut rng).unwrap();
        let mut weights = Vec::new();
        let mut outputs = Vec::new();
        for offset in 0..k {
            let (spec, rows) = split_linear(&LayerSpec::Linear { in_dim, out_dim: out }, k, offset).unwrap();
            prop_assert_eq!(spec, LayerSpec::Linear { in_dim, out_dim: m });
            let shard = full.slice_rows(rows).unwrap();
            weights.push(shard.weight.clone());
            outputs.push(Layer::Linear(shard).forward(x.clone(), &ForwardCtx::default()).unwrap());
        }
        prop_assert_eq!(Tensor::concat_rows(&weights).unwrap(), full.weight.clone());
        let whole = Layer::Linear(full).forward(x, &ForwardCtx::default()).unwrap();
        prop_assert_eq!(Tensor::concat_cols(&outputs).unwrap(), whole);
    }

    #[test]
    fn group_members_agree_on_slot_owners(groups in 1usize..5, k in group_sizes(), per in 1usize..5) {
        let n = groups * k;
        let batch = per * k;
        for w in 0..n {
            for slot in 0..batch {
                let owner = modulo_slot_owner(slot, batch, k, w, n, true);
                let lead = (w / k) * k;
                prop_assert_eq!(owner, modulo_slot_owner(slot, batch, k, lead, n, true));
                prop_assert_eq!(owner, lead + slot / per);
            }
        }
    }

    #[test]
    fn fabric_conserves_scalars(n in 1usize..5, sizes in prop::collection::vec(0usize..6, 16)) {
        let fabric = Fabric::<f32>::new(n);
        let group: Vec<usize> = (0..n).collect();
        let op = OpDesc::new(Phase::ShardFprop, "conserve");
        let size = |src: usize, dst: usize| sizes[src * 4 + dst];
        let received: Vec<usize> = thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .map(|w| {
                    let (fabric, group, op) = (&fabric, &group, &op);
                    s.spawn(move || {
                        let sends = (0..n).filter(|&d| d != w).map(|d| (d, vec![w as f32; size(w, d)])).collect();
                        let got = fabric.scatter_gather(w, group, op, sends).unwrap();
                        for (src, payload) in &got {
                            assert_eq!(payload.len(), size(*src, w));
                            assert!(payload.iter().all(|&v| v == *src as f32));
                        }
                        got.iter().map(|(_, p)| p.len()).sum()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let total = fabric.stats().total(Phase::ShardFprop);
        let expected: usize = (0..n).flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d))).map(|(s, d)| size(s, d)).sum();
        let nonempty = (0..n).flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d))).filter(|&(s, d)| size(s, d) > 0).count();
        prop_assert_eq!(total.sent, expected as u64);
        prop_assert_eq!(total.received, expected as u64);
        prop_assert_eq!(received.iter().sum::<usize>(), expected);
        prop_assert_eq!(total.messages, nonempty as u64);
    }

    #[test]
    fn partition_preserves_structure(k in group_sizes(), input in 1usize..20, widths in prop::collection::vec(1usize..5, 1..4)) {
        let mut layers = Vec::new();
        let mut d = input;
        for w in &widths {
            layers.push(LayerSpec::Linear { in_dim: d, out_dim: w * k });
            layers.push(LayerSpec::Relu);
            d = w * k;
        }
        layers.push(LayerSpec::LogSoftmax);
        let spec = LayerSpec::Seq(layers);
        let config = PartitionConfig::new(k, 2 * k);
        let mut owned = vec![vec![0usize; 0]; widths.len()];
        for offset in 0..k {
            let plan = partition_network(&spec, &[input], &config, offset).unwrap();
            prop_assert_eq!(plan.count(LayerKind::Linear), widths.len());
            prop_assert_eq!(plan.count(LayerKind::Modulo), usize::from(k > 1));
            for pair in plan.layers.windows(2) {
                prop_assert_eq!(&pair[0].output_shape, &pair[1].input_shape);
            }
            prop_assert_eq!(plan.layers.last().unwrap().output_shape.clone(), vec![d]);
            for (i, l) in plan.layers.iter().filter(|l| l.spec.kind() == LayerKind::Linear).enumerate() {
                if let Some((rows, full)) = &l.owned_rows {
                    prop_assert_eq!(*full, widths[i] * k);
                    owned[i].extend(rows.clone());
                }
            }
        }
        if k > 1 {
            for (i, rows) in owned.iter_mut().enumerate() {
                rows.sort_unstable();
                prop_assert_eq!(rows.clone(), (0..widths[i] * k).collect::<Vec<_>>());
            }
        }
    }
}
