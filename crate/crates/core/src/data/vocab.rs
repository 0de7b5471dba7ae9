//! Code vocabulary with reserved padding and unknown slots.

use std::collections::HashMap;

use super::PatientRecord;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Deterministic token table: ids 0 and 1 are reserved, the rest are assigned
/// by descending corpus frequency with lexicographic tie-breaking.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn build(records: &[PatientRecord], min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in records {
            for v in &r.visits {
                for c in &v.codes {
                    *counts.entry(c.as_str()).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, n)| n >= min_count.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        id_to_token.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    /// Id for a token; unseen tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Total table size including the two reserved slots.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= 2
    }
}
