use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major run-length encoded bitmap; `counts` alternate, starting with a run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl RleMask {
    pub fn encode(height: usize, width: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), height * width);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Self {
            height,
            width,
            counts,
        }
    }

    pub fn decode(&self) -> Result<Vec<bool>> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::InvalidArgument(format!(
                "run lengths cover {total} pixels, mask is {}x{}",
                self.height, self.width
            )));
        }
        let mut bits = Vec::with_capacity(self.height * self.width);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(bits)
    }

    pub fn popcount(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as usize).sum()
    }
}
