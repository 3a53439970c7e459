use std::cmp::Ordering;

/// Gradient statistics accumulated into one bin.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinStat {
    pub g: f64,
    pub h: f64,
    pub count: u32,
}

impl BinStat {
    pub fn add(&mut self, other: &BinStat) {
        self.g += other.g;
        self.h += other.h;
        self.count += other.count;
    }
}

/// Per-bin statistics of one feature within one node.
pub type FeatureHistogram = Vec<BinStat>;

pub fn build_histogram(bins: &[u8], rows: &[u32], grad: &[f64], hess: &[f64], n_bins: usize) -> FeatureHistogram {
    let mut hist = vec![BinStat::default(); n_bins];
    for &r in rows {
        let r = r as usize;
        let s = &mut hist[bins[r] as usize];
        s.g += grad[r];
        s.h += hess[r];
        s.count += 1;
    }
    hist
}

/// Set of bins routed to the left child.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct BinSet([u64; 4]);

impl BinSet {
    pub fn insert(&mut self, bin: u8) {
        self.0[(bin >> 6) as usize] |= 1 << (bin & 63);
    }

    pub fn contains(&self, bin: u8) -> bool {
        self.0[(bin >> 6) as usize] & (1 << (bin & 63)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&b| self.contains(b))
    }
}

impl FromIterator<u8> for BinSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut s = BinSet::default();
        for b in iter {
            s.insert(b);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub left_bins: BinSet,
    pub gain: f64,
    pub left: BinStat,
    pub right: BinStat,
}

/// Second-order gain of separating `left` from `right`.
pub fn split_gain(left: &BinStat, right: &BinStat, lambda: f64) -> f64 {
    let (gl, hl, gr, hr) = (left.g, left.h, right.g, right.h);
    gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr) * (gl + gr) / (hl + hr + lambda)
}

/// Best categorical partition over all features.
///
/// Within a feature the occupied bins are ordered by `G/H` and every prefix
/// is tried as the left subset. Ties go to the lowest feature index, then
/// the smallest left subset. Returns `None` when no split has positive gain
/// with at least `min_leaf` rows on each side.
pub fn best_split(hists: &[FeatureHistogram], lambda: f64, min_leaf: usize) -> Option<SplitCandidate> {
    let mut best: Option<SplitCandidate> = None;
    for (feature, hist) in hists.iter().enumerate() {
        let mut occupied: Vec<(u8, BinStat)> = hist
            .iter()
            .enumerate()
            .filter(|(_, s)| s.count > 0)
            .map(|(b, s)| (b as u8, *s))
            .collect();
        if occupied.len() < 2 {
            continue;
        }
        occupied.sort_by(|a, b| {
            let ra = a.1.g / a.1.h;
            let rb = b.1.g / b.1.h;
            ra.partial_cmp(&rb).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
        });
        let mut total = BinStat::default();
        for (_, s) in &occupied {
            total.add(s);
        }
        let mut left = BinStat::default();
        for k in 1..occupied.len() {
            left.add(&occupied[k - 1].1);
            let right = BinStat {
                g: total.g - left.g,
                h: total.h - left.h,
                count: total.count - left.count,
            };
            if (left.count as usize) < min_leaf || (right.count as usize) < min_leaf {
                continue;
            }
            let gain = split_gain(&left, &right, lambda);
            if gain > 0.0 && best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature,
                    left_bins: occupied[..k].iter().map(|(b, _)| *b).collect(),
                    gain,
                    left,
                    right,
                });
            }
        }
    }
    best
}
