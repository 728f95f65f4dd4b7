//! Named model/adapter configurations used by trace generation and the CLI.

use serde::Serialize;

/// A base-model size paired with the adapter ranks it serves. Adapter ranks
/// are assigned round-robin from `rank_list` by adapter index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSetting {
    pub name: &'static str,
    pub hidden_size: usize,
    pub rank_list: &'static [usize],
}

pub const SETTINGS: &[ModelSetting] = &[
    ModelSetting { name: "S1", hidden_size: 4096, rank_list: &[8] },
    ModelSetting { name: "S2", hidden_size: 4096, rank_list: &[64, 32, 16, 8] },
    ModelSetting { name: "S4", hidden_size: 5120, rank_list: &[64, 32, 16] },
    ModelSetting { name: "S5", hidden_size: 7168, rank_list: &[32] },
    ModelSetting { name: "S6", hidden_size: 8192, rank_list: &[64] },
];

pub fn setting(name: &str) -> Option<&'static ModelSetting> {
    SETTINGS.iter().find(|s| s.name == name)
}

impl ModelSetting {
    pub fn rank_for_adapter(&self, adapter_index: usize) -> usize {
        self.rank_list[adapter_index % self.rank_list.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_round_robin() {
        let s2 = setting("S2").unwrap();
        assert_eq!(s2.hidden_size, 4096);
        let ranks: Vec<usize> = (0..8).map(|i| s2.rank_for_adapter(i)).collect();
        assert_eq!(ranks, vec![64, 32, 16, 8, 64, 32, 16, 8]);
        assert!(setting("S3").is_none());
    }
}
