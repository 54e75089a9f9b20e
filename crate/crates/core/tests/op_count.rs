//! The CCR numerator counts exactly the multiply-accumulates a LINEAR layer
//! performs in one fprop and bprop.

use hybridnet::net::{ForwardCtx, Layer, LayerSpec};
use hybridnet::partition::{ccr, PartitionConfig, PartitionContext};
use hybridnet::tensor::{mac_count, reset_mac_count};
use hybridnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ccr_numerator_matches_counted_macs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (b, in_dim, out_dim, k) in [(4, 16, 8, 2), (8, 256, 64, 4), (2, 3, 12, 3), (6, 10, 10, 1)] {
        let spec = LayerSpec::Linear { in_dim, out_dim };
        let mut layer = Layer::<f64>::from_spec(&spec, &mut rng).unwrap();
        let x = Tensor::random_uniform(vec![b, in_dim], -1.0, 1.0, &mut rng).unwrap();
        let g = Tensor::random_uniform(vec![b, out_dim], -1.0, 1.0, &mut rng).unwrap();
        reset_mac_count();
        layer.forward(x, &ForwardCtx::default()).unwrap();
        layer.backward(&g).unwrap();
        let macs = mac_count() as f64;
        assert_eq!(macs, (3 * b * in_dim * out_dim) as f64);

        // At the MODULO boundary the denominator is 2*B*in*(K-1)/K.
        let ctx = PartitionContext::new(&[in_dim], PartitionConfig::new(k, b), 0);
        let ratio = ccr(&spec, b, &ctx);
        if k == 1 {
            assert!(ratio.is_infinite());
        } else {
            let scalars = 2.0 * (b * in_dim) as f64 * (k - 1) as f64 / k as f64;
            assert!((ratio * scalars - macs).abs() <= 1e-9 * macs, "B={b} {in_dim}->{out_dim} K={k}");
        }
    }
}
