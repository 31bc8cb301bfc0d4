//! Report similarity (BLEU-4, ROUGE-L, METEOR-lite) and clinical efficacy
//! scores computed from labels extracted out of report text.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabelRegistry};
use crate::error::{Error, Result};
use crate::heads::f1_score;
use crate::text::{normalize, words};

/// Substitute for a zero matched n-gram count.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Column order of the plain-text table.
pub const COLUMNS: [&str; 6] = ["METEOR", "ROUGE-L", "P", "R", "F1", "BLEU-4"];

const METEOR_NODE_BUDGET: usize = 100_000;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4: clipped n-gram counts are summed over the corpus before the
/// precisions are formed. Orders for which the candidates contain no n-gram at
/// all are left out of the geometric mean.
pub fn bleu4<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Mismatch(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("BLEU needs at least one candidate".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let c = words(c.as_ref());
        let r = words(r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            for (g, k) in &cc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if total[n] == 0 {
            continue;
        }
        let m = if matched[n] == 0 { BLEU_EPSILON } else { matched[n] as f64 };
        log_sum += (m / total[n] as f64).ln();
        orders += 1;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS precision, recall and balanced F.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let c = words(candidate);
    let r = words(reference);
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return RougeScore { precision: 0.0, recall: 0.0, f: 0.0 };
    }
    let precision = l / c.len() as f64;
    let recall = l / r.len() as f64;
    RougeScore { precision, recall, f: 2.0 * precision * recall / (precision + recall) }
}

/// Strips one English suffix: `ing`, `ed`, `es` after a sibilant, or a plural `s`.
pub fn stem(word: &str) -> &str {
    let n = word.len();
    if n > 5 && word.ends_with("ing") {
        return &word[..n - 3];
    }
    if n > 4 && word.ends_with("ed") {
        return &word[..n - 2];
    }
    if n > 4 && word.ends_with("es") {
        let base = &word[..n - 2];
        if ["s", "x", "z", "ch", "sh"].iter().any(|s| base.ends_with(s)) {
            return base;
        }
    }
    if n > 3 && word.ends_with('s') && !word.ends_with("ss") {
        return &word[..n - 1];
    }
    word
}

/// Alignment `cand position -> ref position` and its chunk count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub pairs: Vec<Option<usize>>,
    pub matches: usize,
    pub chunks: usize,
}

fn count_chunks(pairs: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    for (j, p) in pairs.iter().enumerate() {
        if let Some(r) = *p {
            let continues = j > 0 && r > 0 && pairs[j - 1] == Some(r - 1);
            if !continues {
                chunks += 1;
            }
        }
    }
    chunks
}

/// Longest runs first until no matchable token pair is left.
fn greedy_tiling(c: &[usize], r: &[usize]) -> Vec<Option<usize>> {
    let mut pairs = vec![None; c.len()];
    let mut used = vec![false; r.len()];
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..c.len() {
            for j in 0..r.len() {
                let mut k = 0;
                while i + k < c.len() && j + k < r.len() && pairs[i + k].is_none() && !used[j + k] && c[i + k] == r[j + k] {
                    k += 1;
                }
                if k > 0 && best.is_none_or(|(_, _, bk)| k > bk) {
                    best = Some((i, j, k));
                }
            }
        }
        let Some((i, j, k)) = best else { break };
        for t in 0..k {
            pairs[i + t] = Some(j + t);
            used[j + t] = true;
        }
    }
    pairs
}

struct ChunkSearch<'a> {
    c: &'a [usize],
    positions: HashMap<usize, Vec<usize>>,
    skips: HashMap<usize, usize>,
    used: Vec<bool>,
    pairs: Vec<Option<usize>>,
    best: Vec<Option<usize>>,
    best_chunks: usize,
    nodes: usize,
}

impl ChunkSearch<'_> {
    fn run(&mut self, j: usize, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best_chunks || self.nodes > METEOR_NODE_BUDGET {
            return;
        }
        if j == self.c.len() {
            self.best_chunks = chunks;
            self.best = self.pairs.clone();
            return;
        }
        let class = self.c[j];
        let prev = if j > 0 { self.pairs[j - 1] } else { None };
        let mut options: Vec<usize> = self.positions.get(&class).map_or(Vec::new(), |p| p.iter().copied().filter(|&r| !self.used[r]).collect());
        // try the continuing position first
        if let Some(p) = prev {
            if let Some(k) = options.iter().position(|&r| r == p + 1) {
                options[..=k].rotate_right(1);
            }
        }
        for r in options {
            let extra = usize::from(prev.is_none_or(|p| p + 1 != r));
            self.used[r] = true;
            self.pairs[j] = Some(r);
            self.run(j + 1, chunks + extra);
            self.pairs[j] = None;
            self.used[r] = false;
        }
        if let Some(s) = self.skips.get_mut(&class) {
            if *s > 0 {
                *s -= 1;
                self.run(j + 1, chunks);
                *self.skips.get_mut(&class).unwrap() += 1;
            }
        }
    }
}

fn stem_classes<'a>(ws: &'a [String], ids: &mut HashMap<&'a str, usize>) -> Vec<usize> {
    ws.iter()
        .map(|w| {
            let n = ids.len();
            *ids.entry(stem(w)).or_insert(n)
        })
        .collect()
}

/// Maximum-match unigram alignment over stem classes with the fewest chunks
/// the search finds within its node budget.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let c = stem_classes(candidate, &mut ids);
    let r = stem_classes(reference, &mut ids);

    let mut positions: HashMap<usize, Vec<usize>> = HashMap::new();
    for (j, &k) in r.iter().enumerate() {
        positions.entry(k).or_default().push(j);
    }
    let mut c_count: HashMap<usize, usize> = HashMap::new();
    for &k in &c {
        *c_count.entry(k).or_insert(0) += 1;
    }
    let skips: HashMap<usize, usize> = c_count
        .iter()
        .map(|(k, &n)| (*k, n - n.min(positions.get(k).map_or(0, Vec::len))))
        .collect();

    let greedy = greedy_tiling(&c, &r);
    let greedy_chunks = count_chunks(&greedy);
    let mut search = ChunkSearch {
        c: &c,
        positions,
        skips,
        used: vec![false; r.len()],
        pairs: vec![None; c.len()],
        best: greedy,
        best_chunks: greedy_chunks,
        nodes: 0,
    };
    search.run(0, 0);
    let pairs = search.best;
    Alignment { matches: pairs.iter().flatten().count(), chunks: count_chunks(&pairs), pairs }
}

/// METEOR without a synonym lexicon: exact and suffix-stem matches only.
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    let a = align(&c, &r);
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / c.len() as f64;
    let rec = m / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// Label `i` is positive iff the normalized report contains its anchor phrase.
pub fn extract_labels(report: &str, registry: &LabelRegistry) -> Vec<bool> {
    let text = normalize(report);
    (0..registry.len()).map(|i| text.contains(&normalize(&registry.anchor(i)))).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.tp, self.fp, self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Whether the label occurs in the ground truth and so enters the macro average.
    pub evaluated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeMetrics {
    pub per_label: Vec<LabelMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label confusion and macro P/R/F1 over labels present in `truth`.
pub fn ce_metrics(predicted: &[Vec<bool>], truth: &[Vec<bool>], registry: &LabelRegistry) -> Result<CeMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Mismatch(format!("{} predictions for {} references", predicted.len(), truth.len())));
    }
    let k = registry.len();
    let mut counts = vec![ConfusionCounts::default(); k];
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != k || t.len() != k {
            return Err(Error::Shape(format!("label vectors must have {k} entries")));
        }
        for i in 0..k {
            counts[i].add(p[i], t[i]);
        }
    }
    let per_label: Vec<LabelMetrics> = counts
        .iter()
        .enumerate()
        .map(|(i, c)| LabelMetrics {
            name: registry.name(i).to_string(),
            counts: *c,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            evaluated: c.tp + c.fn_ > 0,
        })
        .collect();
    let live: Vec<&LabelMetrics> = per_label.iter().filter(|l| l.evaluated).collect();
    let mean = |f: fn(&LabelMetrics) -> f64| {
        if live.is_empty() {
            0.0
        } else {
            live.iter().map(|l| f(l)).sum::<f64>() / live.len() as f64
        }
    };
    Ok(CeMetrics { precision: mean(|l| l.precision), recall: mean(|l| l.recall), f1: mean(|l| l.f1), per_label })
}

/// CE metrics of report texts against ground-truth label vectors.
pub fn ce_from_reports<S: AsRef<str>>(reports: &[S], truth: &[Vec<bool>], registry: &LabelRegistry) -> Result<CeMetrics> {
    let predicted: Vec<Vec<bool>> = reports.iter().map(|r| extract_labels(r.as_ref(), registry)).collect();
    ce_metrics(&predicted, truth, registry)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub cases: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: Vec<LabelMetrics>,
}

impl MetricsReport {
    /// Scores in [`COLUMNS`] order.
    pub fn row(&self) -> [f64; 6] {
        [self.meteor, self.rouge_l, self.precision, self.recall, self.f1, self.bleu4]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores generated reports against the reference cases with the same ids.
/// Per-case ROUGE-L and METEOR-lite are averaged over cases where at least one
/// of the two reports is non-empty.
pub fn evaluate_corpus(generated: &[(u64, String)], reference: &Dataset, meta: RunMeta) -> Result<MetricsReport> {
    if reference.is_empty() {
        return Err(Error::Empty("reference split has no cases".into()));
    }
    let mut by_id: HashMap<u64, &str> = HashMap::with_capacity(generated.len());
    for (id, text) in generated {
        if by_id.insert(*id, text).is_some() {
            return Err(Error::Mismatch(format!("case {id} generated twice")));
        }
    }
    let ref_ids: HashSet<u64> = reference.cases.iter().map(|c| c.id).collect();
    if let Some(id) = by_id.keys().find(|id| !ref_ids.contains(id)) {
        return Err(Error::Mismatch(format!("case {id} is not in the reference split")));
    }
    let mut cands = Vec::with_capacity(reference.len());
    for c in &reference.cases {
        let text = by_id.get(&c.id).ok_or_else(|| Error::Mismatch(format!("no generation for case {}", c.id)))?;
        cands.push(*text);
    }
    let refs: Vec<&str> = reference.cases.iter().map(|c| c.report.as_str()).collect();
    let truth: Vec<Vec<bool>> = reference.cases.iter().map(|c| c.labels.clone()).collect();

    let bleu = bleu4(&cands, &refs)?;
    let (mut rouge, mut meteor, mut n) = (0.0, 0.0, 0usize);
    for (c, r) in cands.iter().zip(&refs) {
        if c.trim().is_empty() && r.trim().is_empty() {
            continue;
        }
        rouge += rouge_l(c, r).f;
        meteor += meteor_lite(c, r);
        n += 1;
    }
    let n = n.max(1) as f64;
    let ce = ce_from_reports(&cands, &truth, &reference.registry)?;
    Ok(MetricsReport {
        meta,
        cases: reference.len(),
        bleu4: bleu,
        rouge_l: rouge / n,
        meteor: meteor / n,
        precision: ce.precision,
        recall: ce.recall,
        f1: ce.f1,
        per_label: ce.per_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub name: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// In [`COLUMNS`] order.
    pub columns: Vec<MeanStd>,
}

impl AggregateReport {
    pub fn f1(&self) -> MeanStd {
        self.columns[4]
    }
}

/// Mean ± std of every column across runs.
pub fn aggregate(name: &str, runs: &[MetricsReport]) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(Error::Empty("no runs to aggregate".into()));
    }
    let columns = (0..COLUMNS.len())
        .map(|c| MeanStd::of(&runs.iter().map(|r| r.row()[c]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(AggregateReport {
        name: name.to_string(),
        runs: runs.len(),
        seeds: runs.iter().map(|r| r.meta.seed).collect(),
        columns,
    })
}

/// Aligned plain-text table, one row per aggregate.
pub fn render_table(rows: &[AggregateReport]) -> String {
    let cell = |m: &MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
    let name_w = rows.iter().map(|r| r.name.chars().count()).chain([6]).max().unwrap_or(6);
    let col_w = rows
        .iter()
        .flat_map(|r| r.columns.iter().map(|m| cell(m).chars().count()))
        .chain(COLUMNS.iter().map(|c| c.len()))
        .max()
        .unwrap_or(8);
    let mut out = format!("{:<name_w$}", "Method");
    for c in COLUMNS {
        out.push_str(&format!("  {c:>col_w$}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<name_w$}", r.name));
        for m in &r.columns {
            out.push_str(&format!("  {:>col_w$}", cell(m)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stemmer_rules() {
        assert_eq!(stem("nodules"), "nodule");
        assert_eq!(stem("boxes"), "box");
        assert_eq!(stem("seeing"), "see");
        assert_eq!(stem("noted"), "not");
        assert_eq!(stem("mass"), "mass");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("ring"), "ring");
    }

    #[test]
    fn chunk_counting() {
        assert_eq!(count_chunks(&[Some(0), Some(1), None, Some(2)]), 2);
        assert_eq!(count_chunks(&[Some(1), Some(0)]), 2);
        assert_eq!(count_chunks(&[None, None]), 0);
    }

    fn brute(c: &[usize], r: &[usize], j: usize, used: &mut Vec<bool>, pairs: &mut Vec<Option<usize>>, best: &mut (usize, usize)) {
        if j == c.len() {
            let m = pairs.iter().flatten().count();
            let ch = count_chunks(pairs);
            if m > best.0 || (m == best.0 && ch < best.1) {
                *best = (m, ch);
            }
            return;
        }
        brute(c, r, j + 1, used, pairs, best);
        for k in 0..r.len() {
            if !used[k] && r[k] == c[j] {
                used[k] = true;
                pairs[j] = Some(k);
                brute(c, r, j + 1, used, pairs, best);
                pairs[j] = None;
                used[k] = false;
            }
        }
    }

    #[test]
    fn alignment_matches_exhaustive_search() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(7);
        for _ in 0..300 {
            let c: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..3)).collect();
            let r: Vec<usize> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..3)).collect();
            let cw: Vec<String> = c.iter().map(|i| format!("w{i}")).collect();
            let rw: Vec<String> = r.iter().map(|i| format!("w{i}")).collect();
            let mut best = (0, usize::MAX);
            brute(&c, &r, 0, &mut vec![false; r.len()], &mut vec![None; c.len()], &mut best);
            let a = align(&cw, &rw);
            assert_eq!((a.matches, a.chunks), best, "{c:?} {r:?}");
        }
    }

    #[test]
    fn table_has_columns_in_order() {
        let row = AggregateReport {
            name: "full".into(),
            runs: 1,
            seeds: vec![0],
            columns: vec![MeanStd { mean: 0.5, std: 0.0 }; 6],
        };
        let t = render_table(&[row]);
        let header = t.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().skip(1).collect();
        assert_eq!(cols, COLUMNS);
        assert!(t.contains("0.5000 ± 0.0000"));
    }
}
