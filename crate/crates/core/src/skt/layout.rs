use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous token range owned by one quantization level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelRange {
    pub name: String,
    pub offset: u32,
    pub size: u32,
}

impl LevelRange {
    pub fn contains(&self, token: u32) -> bool {
        token >= self.offset && token < self.offset + self.size
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.offset..self.offset + self.size
    }
}

/// Level-tagged vocabulary: every level owns a disjoint ID range, followed by
/// the EOS and PAD tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub levels: Vec<LevelRange>,
    pub eos: u32,
    pub pad: u32,
    pub vocab_size: u32,
}

pub const DEDUP_LEVEL: &str = "dedup";

impl VocabLayout {
    pub fn new<S: AsRef<str>>(levels: &[(S, u32)]) -> Self {
        let mut offset = 0;
        let levels = levels
            .iter()
            .map(|(name, size)| {
                let r = LevelRange {
                    name: name.as_ref().to_string(),
                    offset,
                    size: *size,
                };
                offset += size;
                r
            })
            .collect();
        Self {
            levels,
            eos: offset,
            pad: offset + 1,
            vocab_size: offset + 2,
        }
    }

    /// `head-0..head-{lh-1}`, `tail-0..tail-{lt-1}`, `dedup`.
    pub fn skt(l_head: usize, n_head: u32, l_tail: usize, n_tail: u32, dedup: u32) -> Self {
        let mut levels: Vec<(String, u32)> = (0..l_head).map(|i| (format!("head-{i}"), n_head)).collect();
        levels.extend((0..l_tail).map(|i| (format!("tail-{i}"), n_tail)));
        levels.push((DEDUP_LEVEL.to_string(), dedup));
        Self::new(&levels)
    }

    /// `code-0..code-{l-1}`, `dedup`.
    pub fn rqk(l: usize, n: u32, dedup: u32) -> Self {
        let mut levels: Vec<(String, u32)> = (0..l).map(|i| (format!("code-{i}"), n)).collect();
        levels.push((DEDUP_LEVEL.to_string(), dedup));
        Self::new(&levels)
    }

    /// Separate stacks for head (`l_head` levels) and tail (`l_tail_total` levels).
    pub fn rqk_split(l_head: usize, l_tail_total: usize, n: u32, dedup: u32) -> Self {
        Self::skt(l_head, n, l_tail_total, n, dedup)
    }

    pub fn level_index(&self, name: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("layout has no level named {name:?}")))
    }

    pub fn token(&self, level: usize, code: usize) -> Result<u32> {
        let l = &self.levels[level];
        if code as u32 >= l.size {
            return Err(Error::Config(format!(
                "code {code} out of range for level {} of size {}",
                l.name, l.size
            )));
        }
        Ok(l.offset + code as u32)
    }

    pub fn level_of(&self, token: u32) -> Option<usize> {
        self.levels.iter().position(|l| l.contains(token))
    }

    pub fn is_special(&self, token: u32) -> bool {
        token == self.eos || token == self.pad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_disjoint_and_specials_outside() {
        let l = VocabLayout::skt(4, 8, 2, 8, 4);
        assert_eq!(l.levels.len(), 7);
        for t in 0..l.eos {
            assert_eq!(l.levels.iter().filter(|r| r.contains(t)).count(), 1);
        }
        assert_eq!(l.level_of(l.eos), None);
        assert_eq!(l.level_of(l.pad), None);
        assert_eq!(l.token(1, 3).unwrap(), 11);
        assert!(l.token(1, 8).is_err());
        assert_eq!(l.vocab_size, 4 * 8 + 2 * 8 + 4 + 2);
    }
}
