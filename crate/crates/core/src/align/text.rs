//! Frozen hashed bag-of-tokens text encoder with a learnable projection.

use rand_distr::{Distribution, StandardNormal};

use crate::rng;

/// Lowercased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '-')
        .map(|w| w.trim_matches('-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Unigrams plus adjacent bigrams, so word order inside a phrase matters.
pub fn tokens(text: &str) -> Vec<String> {
    let w = words(text);
    let mut out = w.clone();
    out.extend(w.windows(2).map(|p| format!("{} {}", p[0], p[1])));
    out
}

fn bucket(token: &str, buckets: usize) -> usize {
    (rng::derive_seed(0, token) % buckets as u64) as usize
}

/// The frozen part: a seeded `buckets×width` Gaussian table.
#[derive(Debug, Clone, PartialEq)]
pub struct TextStub {
    buckets: usize,
    width: usize,
    table: Vec<f64>,
}

impl TextStub {
    pub fn new(buckets: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::substream(seed, "text-table");
        let table = (0..buckets * width)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        Self {
            buckets,
            width,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Unit-norm token-count vector over hash buckets (all zeros for empty text).
    pub fn bag(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.buckets];
        for t in tokens(text) {
            v[bucket(&t, self.buckets)] += 1.0;
        }
        let n = crate::tensor::norm(&v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    /// Frozen features `bag · table`.
    pub fn features(&self, text: &str) -> Vec<f64> {
        let bag = self.bag(text);
        if bag.iter().all(|v| *v == 0.0) {
            log::warn!("empty text embedded as the projection bias only");
        }
        let mut out = vec![0.0; self.width];
        for (b, &x) in bag.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.table[b * self.width..(b + 1) * self.width];
            out.iter_mut().zip(row).for_each(|(o, r)| *o += x * r);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    #[test]
    fn tokens_include_bigrams() {
        assert_eq!(
            tokens("Two Wind spikes."),
            vec!["two", "wind", "spikes", "two wind", "wind spikes"]
        );
    }

    #[test]
    fn identical_text_identical_features() {
        let s = TextStub::new(2048, 64, 1);
        assert_eq!(s.features("rising trend"), s.features("rising trend"));
        assert_eq!(s.features("").iter().filter(|v| **v != 0.0).count(), 0);
    }

    #[test]
    fn disjoint_texts_have_orthogonal_bags() {
        let s = TextStub::new(2048, 64, 1);
        let (a, b) = (s.bag("heatwave"), s.bag("blizzard"));
        assert_ne!(
            bucket("heatwave", 2048),
            bucket("blizzard", 2048),
            "fixture must be collision-free"
        );
        assert_eq!(dot(&a, &b), 0.0);
    }
}
