//! Brute-force weights computed straight from raw n-gram and length counts,
//! written without reference to the library's internals.

use std::collections::BTreeMap;

use mtmrc::corpus::{Sample, TaskDataset};
use mtmrc::lm::LmConfig;

const BOS: &str = "\u{0}bos";
const UNK: &str = "<unk>";

struct Lm {
    cfg: LmConfig,
    vocab: Vec<String>,
    counts: BTreeMap<Vec<String>, u64>,
    context_totals: BTreeMap<Vec<String>, u64>,
}

fn words(s: &Sample) -> Vec<String> {
    s.question.iter().map(|t| t.surface.to_lowercase()).collect()
}

impl Lm {
    fn fit(questions: &[Vec<String>], cfg: LmConfig) -> Lm {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for q in questions {
            for w in q {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        // BTreeMap order is alphabetical, and the sort is stable.
        ranked.sort_by_key(|&(_, c)| std::cmp::Reverse(c));
        let mut vocab = vec![UNK.to_string()];
        vocab.extend(ranked.iter().take(cfg.vocab_size).map(|(w, _)| w.to_string()));
        let mut lm = Lm {
            cfg,
            vocab,
            counts: BTreeMap::new(),
            context_totals: BTreeMap::new(),
        };
        for q in questions.iter().filter(|q| !q.is_empty()) {
            let padded = lm.pad(q);
            for i in cfg.order - 1..padded.len() {
                for n in 1..=cfg.order {
                    let gram = padded[i + 1 - n..=i].to_vec();
                    *lm.context_totals.entry(gram[..n - 1].to_vec()).or_insert(0) += 1;
                    *lm.counts.entry(gram).or_insert(0) += 1;
                }
            }
        }
        lm
    }

    fn pad(&self, q: &[String]) -> Vec<String> {
        let mut out = vec![BOS.to_string(); self.cfg.order - 1];
        out.extend(q.iter().map(|w| {
            if self.vocab.contains(w) {
                w.clone()
            } else {
                UNK.to_string()
            }
        }));
        out
    }

    fn prob(&self, history: &[String], w: &str) -> f64 {
        let v = self.vocab.len() as f64;
        let (k, lambda) = (self.cfg.k, self.cfg.lambda);
        let mut p = 0.0;
        for n in 1..=self.cfg.order {
            let ctx = history[history.len() + 1 - n..].to_vec();
            let total = self.context_totals.get(&ctx).copied().unwrap_or(0) as f64;
            let mut gram = ctx;
            gram.push(w.to_string());
            let c = self.counts.get(&gram).copied().unwrap_or(0) as f64;
            let est = (c + k) / (total + k * v);
            if n == 1 {
                p = est;
            } else if total > 0.0 {
                p = lambda * est + (1.0 - lambda) * p;
            }
        }
        p
    }

    fn cross_entropy(&self, q: &[String]) -> f64 {
        if q.is_empty() {
            return 0.0;
        }
        let padded = self.pad(q);
        let o = self.cfg.order;
        let nll: f64 = (o - 1..padded.len())
            .map(|i| -self.prob(&padded[i + 1 - o..i], &padded[i]).ln())
            .sum();
        nll / q.len() as f64
    }
}

struct Lengths {
    hist: BTreeMap<usize, u64>,
    limit: usize,
    n: u64,
    k: f64,
}

impl Lengths {
    fn fit(lengths: &[usize], k: f64) -> Lengths {
        let mut hist = BTreeMap::new();
        for &l in lengths {
            *hist.entry(l).or_insert(0) += 1;
        }
        Lengths {
            limit: lengths.iter().max().copied().unwrap_or(0) + 5,
            hist,
            n: lengths.len() as u64,
            k,
        }
    }

    fn score(&self, l: usize) -> f64 {
        let c = if l <= self.limit { self.hist.get(&l).copied().unwrap_or(0) } else { 0 };
        let total = self.n as f64 + self.k * (self.limit as f64 + 1.0);
        -((c as f64 + self.k) / total).ln()
    }
}

fn minmax(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// `(id, raw scores [h1q, hkq, h1a, hka], weight)` for every auxiliary sample,
/// in dataset order.
pub fn oracle_weights(
    target: &TaskDataset,
    aux: &[TaskDataset],
    cfg: LmConfig,
    k_len: f64,
) -> Vec<(String, [f64; 4], f64)> {
    let fit = |ds: &TaskDataset| {
        let qs: Vec<Vec<String>> = ds.samples.iter().map(words).collect();
        let ls: Vec<usize> = ds.samples.iter().map(|s| s.answer.len()).collect();
        (Lm::fit(&qs, cfg), Lengths::fit(&ls, k_len))
    };
    let (t_lm, t_len) = fit(target);
    let mut raw = Vec::new();
    let mut own_norm_q = Vec::new();
    let mut own_norm_a = Vec::new();
    for ds in aux {
        let (k_lm, k_len_model) = fit(ds);
        let mut hkq = Vec::new();
        let mut hka = Vec::new();
        for s in &ds.samples {
            let q = words(s);
            let l = s.answer.len();
            let r = [t_lm.cross_entropy(&q), k_lm.cross_entropy(&q), t_len.score(l), k_len_model.score(l)];
            hkq.push(r[1]);
            hka.push(r[3]);
            raw.push((s.id.clone(), r));
        }
        own_norm_q.extend(minmax(&hkq));
        own_norm_a.extend(minmax(&hka));
    }
    let h1q = minmax(&raw.iter().map(|r| r.1[0]).collect::<Vec<_>>());
    let h1a = minmax(&raw.iter().map(|r| r.1[2]).collect::<Vec<_>>());
    let ced: Vec<f64> = (0..raw.len())
        .map(|i| (h1q[i] - own_norm_q[i]) + (h1a[i] - own_norm_a[i]))
        .collect();
    let ced_n = minmax(&ced);
    raw.into_iter()
        .zip(ced_n)
        .map(|((id, r), c)| (id, r, 1.0 - c))
        .collect()
}
