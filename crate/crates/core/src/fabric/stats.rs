use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Traffic class a message is accounted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    DpAvg,
    ModuloFprop,
    ModuloBprop,
    ShardFprop,
    ShardBprop,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::DpAvg,
        Phase::ModuloFprop,
        Phase::ModuloBprop,
        Phase::ShardFprop,
        Phase::ShardBprop,
    ];

    pub fn is_mp(self) -> bool {
        self != Phase::DpAvg
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::DpAvg => "DP_AVG",
            Phase::ModuloFprop => "MODULO_FPROP",
            Phase::ModuloBprop => "MODULO_BPROP",
            Phase::ShardFprop => "SHARD_FPROP",
            Phase::ShardBprop => "SHARD_BPROP",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown phase `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counter {
    pub messages: u64,
    pub sent: u64,
    pub received: u64,
}

/// Message and scalar counts per (phase, worker), plus the (phase, src, dst)
/// traffic matrix used for locality checks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    counters: BTreeMap<(Phase, usize), Counter>,
    traffic: BTreeMap<(Phase, usize, usize), u64>,
}

impl CommStats {
    pub(crate) fn record(&mut self, phase: Phase, src: usize, dst: usize, scalars: u64) {
        let s = self.counters.entry((phase, src)).or_default();
        s.messages += 1;
        s.sent += scalars;
        self.counters.entry((phase, dst)).or_default().received += scalars;
        *self.traffic.entry((phase, src, dst)).or_default() += scalars;
    }

    pub fn get(&self, phase: Phase, worker: usize) -> Counter {
        self.counters.get(&(phase, worker)).copied().unwrap_or_default()
    }

    pub fn total(&self, phase: Phase) -> Counter {
        self.counters
            .iter()
            .filter(|((p, _), _)| *p == phase)
            .fold(Counter::default(), |acc, (_, c)| Counter {
                messages: acc.messages + c.messages,
                sent: acc.sent + c.sent,
                received: acc.received + c.received,
            })
    }

    /// Scalars sent under all model-parallel phases.
    pub fn mp_scalars(&self) -> u64 {
        Phase::ALL.iter().filter(|p| p.is_mp()).map(|&p| self.total(p).sent).sum()
    }

    pub fn traffic(&self, phase: Phase, src: usize, dst: usize) -> u64 {
        self.traffic.get(&(phase, src, dst)).copied().unwrap_or(0)
    }

    /// Scalars of `phase` that moved between workers of different MP groups.
    pub fn cross_group(&self, phase: Phase, group_size: usize) -> u64 {
        self.traffic
            .iter()
            .filter(|((p, s, d), _)| *p == phase && s / group_size != d / group_size)
            .map(|(_, v)| *v)
            .sum()
    }

    pub fn workers(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.counters.keys().map(|(_, w)| *w).collect();
        w.sort_unstable();
        w.dedup();
        w
    }

    pub fn clear(&mut self) {
        self.counters.clear();
        self.traffic.clear();
    }

    /// `phase,worker,messages,scalars` rows (scalars sent), one per recorded
    /// pair in phase then worker order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,worker,messages,scalars\n");
        for ((phase, worker), c) in &self.counters {
            out.push_str(&format!("{phase},{worker},{},{}\n", c.messages, c.sent));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_and_csv() {
        let mut s = CommStats::default();
        s.record(Phase::ShardFprop, 0, 1, 5);
        s.record(Phase::ShardFprop, 1, 0, 5);
        s.record(Phase::DpAvg, 0, 2, 7);
        assert_eq!(s.total(Phase::ShardFprop), Counter { messages: 2, sent: 10, received: 10 });
        assert_eq!(s.cross_group(Phase::DpAvg, 2), 7);
        assert_eq!(s.cross_group(Phase::ShardFprop, 2), 0);
        assert_eq!(
            s.to_csv(),
            "phase,worker,messages,scalars\nDP_AVG,0,1,7\nDP_AVG,2,0,0\nSHARD_FPROP,0,1,5\nSHARD_FPROP,1,1,5\n"
        );
        assert_eq!("SHARD_BPROP".parse::<Phase>().unwrap(), Phase::ShardBprop);
    }
}
