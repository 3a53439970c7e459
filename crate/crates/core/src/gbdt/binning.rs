use std::collections::HashMap;

use crate::data::PAD;
use crate::encoding::RowFeatures;

/// Bin of PAD cells in every feature.
pub const PAD_BIN: u8 = 0;

/// Category-code to bin mapping for one feature, fit on train rows only.
///
/// The `max_bins - 1` most frequent codes get bins `1..`, everything else
/// (including codes never seen in training) shares the overflow bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBins {
    /// Codes with a dedicated bin; `codes[i]` owns bin `i + 1`.
    pub codes: Vec<u32>,
    lookup: HashMap<u32, u8>,
}

impl FeatureBins {
    pub fn from_codes(codes: Vec<u32>) -> Self {
        let lookup = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + 1) as u8))
            .collect();
        Self { codes, lookup }
    }

    pub fn n_dedicated(&self) -> usize {
        self.codes.len()
    }

    pub fn overflow_bin(&self) -> u8 {
        (self.codes.len() + 1) as u8
    }

    /// Number of bin values this feature can produce (PAD, dedicated, overflow).
    pub fn n_bins(&self) -> usize {
        self.codes.len() + 2
    }

    pub fn bin(&self, code: u32) -> u8 {
        if code == PAD {
            PAD_BIN
        } else {
            self.lookup.get(&code).copied().unwrap_or_else(|| self.overflow_bin())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMapper {
    pub features: Vec<FeatureBins>,
}

impl BinMapper {
    pub fn fit<'a, I>(rows: I, width: usize, max_bins: usize) -> Self
    where
        I: IntoIterator<Item = &'a RowFeatures>,
    {
        let max_bins = max_bins.clamp(2, 255);
        let mut counts: Vec<HashMap<u32, usize>> = vec![HashMap::new(); width];
        for row in rows {
            for (j, code) in row.cells().enumerate() {
                if code != PAD {
                    *counts[j].entry(code).or_default() += 1;
                }
            }
        }
        let features = counts
            .into_iter()
            .map(|c| {
                let mut by_freq: Vec<(u32, usize)> = c.into_iter().collect();
                by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                by_freq.truncate(max_bins - 1);
                FeatureBins::from_codes(by_freq.into_iter().map(|(code, _)| code).collect())
            })
            .collect();
        Self { features }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn bin_row(&self, row: &RowFeatures) -> Vec<u8> {
        row.cells()
            .zip(&self.features)
            .map(|(code, f)| f.bin(code))
            .collect()
    }

    /// Column-major binned matrix: `out[j][i]` is the bin of row `i`, feature `j`.
    pub fn bin_columns<'a, I>(&self, rows: I) -> Vec<Vec<u8>>
    where
        I: IntoIterator<Item = &'a RowFeatures>,
    {
        let mut cols: Vec<Vec<u8>> = vec![Vec::new(); self.width()];
        for row in rows {
            for ((code, f), col) in row.cells().zip(&self.features).zip(cols.iter_mut()) {
                col.push(f.bin(code));
            }
        }
        cols
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_feature_rows(codes: &[u32]) -> Vec<RowFeatures> {
        // horizon 1 is never built by the encoder, but a 1-wide row is enough here
        codes
            .iter()
            .map(|&c| RowFeatures {
                student_idx: 1,
                observed_len: 1,
                questions: vec![c],
                skills: vec![],
                past_correct: vec![],
            })
            .collect()
    }

    #[test]
    fn three_codes_get_three_bins_plus_pad() {
        let rows = single_feature_rows(&[5, 6, 7, 5, PAD]);
        let m = BinMapper::fit(&rows, 1, 255);
        let f = &m.features[0];
        assert_eq!(f.n_dedicated(), 3);
        assert_eq!(f.bin(PAD), PAD_BIN);
        assert_eq!(f.bin(5), 1);
        let bins: std::collections::BTreeSet<u8> = rows.iter().map(|r| m.bin_row(r)[0]).collect();
        assert_eq!(bins.len(), 4);
    }

    #[test]
    fn overflow_caps_dedicated_bins() {
        let codes: Vec<u32> = (1..=300).collect();
        let m = BinMapper::fit(&single_feature_rows(&codes), 1, 255);
        let f = &m.features[0];
        assert_eq!(f.n_dedicated(), 254);
        assert_eq!(f.overflow_bin(), 255);
        let overflowed = codes.iter().filter(|&&c| f.bin(c) == 255).count();
        assert_eq!(overflowed, 300 - 254);
    }

    #[test]
    fn unseen_code_goes_to_overflow() {
        let m = BinMapper::fit(&single_feature_rows(&[1, 2]), 1, 255);
        assert_eq!(m.features[0].bin(999), m.features[0].overflow_bin());
    }

    #[test]
    fn most_frequent_codes_win() {
        let m = BinMapper::fit(&single_feature_rows(&[9, 9, 9, 4, 4, 1]), 1, 3);
        assert_eq!(m.features[0].codes, vec![9, 4]);
        assert_eq!(m.features[0].bin(1), 3);
    }
}
