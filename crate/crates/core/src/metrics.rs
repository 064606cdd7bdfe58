//! Caption and image evaluation metrics.
//!
//! Text metrics are corpus level and deterministic: n-gram tables use
//! ordered maps and reductions run in corpus order. METEOR is the "lite"
//! variant — exact plus suffix-stem unigram matching, no synonym lexicon —
//! and its fragmentation penalty uses `(chunks - 1)` so a candidate scored
//! against itself is exactly 1.0.

use std::collections::BTreeMap;

/// One candidate with its reference captions. Tokens are pre-split and
/// EOS-stripped; `references` must be non-empty.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        assert!(!references.is_empty(), "EvalPair requires at least one reference");
        Self { candidate, references }
    }
}

type NgramCounts = BTreeMap<Vec<String>, usize>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts {
    let mut out = NgramCounts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// BLEU-4

/// Corpus BLEU with n = 1..4, max-reference clipping, brevity penalty, and
/// add-one smoothing on the n >= 2 precisions.
pub fn bleu4(corpus: &[EvalPair]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in corpus {
        assert!(!pair.references.is_empty());
        let c = pair.candidate.len();
        cand_len += c;
        // Effective reference length: closest to the candidate, shorter on ties.
        let r = pair
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .unwrap();
        ref_len += r;
        for n in 1..=4 {
            let cand = ngram_counts(&pair.candidate, n);
            let mut clip = NgramCounts::new();
            for r in &pair.references {
                for (g, cnt) in ngram_counts(r, n) {
                    let e = clip.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            for (g, cnt) in &cand {
                matched[n - 1] += (*cnt).min(clip.get(g).copied().unwrap_or(0));
                total[n - 1] += cnt;
            }
        }
    }
    if total[0] == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let s = if n == 0 { 0.0 } else { 1.0 };
        log_p += ((matched[n] as f64 + s) / (total[n] as f64 + s)).ln() / 4.0;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

// ---------------------------------------------------------------------------
// ROUGE-L

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure with beta = 1.2, best reference per pair, corpus mean.
pub fn rouge_l(corpus: &[EvalPair]) -> f64 {
    const BETA: f64 = 1.2;
    let mut sum = 0.0;
    for pair in corpus {
        let mut best: f64 = 0.0;
        for r in &pair.references {
            let l = lcs_len(&pair.candidate, r) as f64;
            if l == 0.0 || pair.candidate.is_empty() || r.is_empty() {
                continue;
            }
            let p = l / pair.candidate.len() as f64;
            let rec = l / r.len() as f64;
            let b2 = BETA * BETA;
            let f = (1.0 + b2) * p * rec / (rec + b2 * p);
            best = best.max(f);
        }
        sum += best;
    }
    sum / corpus.len() as f64
}

// ---------------------------------------------------------------------------
// METEOR-lite

/// Light stemmer: strips one of `ing, ed, es, ly, s` when at least three
/// characters remain.
fn stem(w: &str) -> &str {
    for suf in ["ing", "ed", "es", "ly", "s"] {
        if let Some(base) = w.strip_suffix(suf) {
            if base.len() >= 3 {
                return base;
            }
        }
    }
    w
}

/// Greedy in-order unigram alignment: exact matches first, then stem
/// matches on the leftovers. Returns matched (cand_idx, ref_idx) pairs
/// sorted by candidate position.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut ref_used = vec![false; reference.len()];
    let mut cand_match = vec![None; cand.len()];
    for (i, c) in cand.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && c == r {
                ref_used[j] = true;
                cand_match[i] = Some(j);
                break;
            }
        }
    }
    for (i, c) in cand.iter().enumerate() {
        if cand_match[i].is_some() {
            continue;
        }
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && stem(c) == stem(r) {
                ref_used[j] = true;
                cand_match[i] = Some(j);
                break;
            }
        }
    }
    cand_match
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| (i, j)))
        .collect()
}

fn chunk_count(matches: &[(usize, usize)]) -> usize {
    if matches.is_empty() {
        return 0;
    }
    let mut chunks = 1;
    for w in matches.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    chunks
}

/// Unigram-alignment METEOR without a synonym resource. alpha = 0.9,
/// penalty = 0.5 * ((chunks - 1) / matches)^3, best reference per pair.
pub fn meteor_lite(corpus: &[EvalPair]) -> f64 {
    const ALPHA: f64 = 0.9;
    const GAMMA: f64 = 0.5;
    const BETA: f64 = 3.0;
    let mut sum = 0.0;
    for pair in corpus {
        let mut best: f64 = 0.0;
        for r in &pair.references {
            let matches = align(&pair.candidate, r);
            let m = matches.len() as f64;
            if m == 0.0 {
                continue;
            }
            let p = m / pair.candidate.len() as f64;
            let rec = m / r.len() as f64;
            let f = p * rec / (ALPHA * p + (1.0 - ALPHA) * rec);
            let ch = chunk_count(&matches) as f64;
            let penalty = GAMMA * ((ch - 1.0) / m).powf(BETA);
            best = best.max(f * (1.0 - penalty));
        }
        sum += best;
    }
    sum / corpus.len() as f64
}

// ---------------------------------------------------------------------------
// CIDEr-D

/// TF-IDF n-gram consensus (n = 1..4) with min clipping, a Gaussian length
/// penalty (sigma = 6), and the x10 scaling. IDF comes from the corpus
/// references with `ln((N + 1) / df)` so single-image corpora keep nonzero
/// weights.
pub fn cider_d(corpus: &[EvalPair]) -> f64 {
    const SIGMA: f64 = 6.0;
    let n_images = corpus.len();
    let mut idf: [BTreeMap<Vec<String>, f64>; 4] = Default::default();
    for n in 1..=4 {
        let mut df: NgramCounts = NgramCounts::new();
        for pair in corpus {
            let mut seen = NgramCounts::new();
            for r in &pair.references {
                for g in ngram_counts(r, n).into_keys() {
                    seen.entry(g).or_insert(0);
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        idf[n - 1] = df
            .into_iter()
            .map(|(g, d)| (g, ((n_images as f64 + 1.0) / d as f64).ln()))
            .collect();
    }

    let weigh = |tokens: &[String], n: usize| -> BTreeMap<Vec<String>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, c)| {
                let w = idf[n - 1].get(&g).copied().unwrap_or(0.0);
                (g, c as f64 * w)
            })
            .collect()
    };
    let norm = |v: &BTreeMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();

    let mut total = 0.0;
    for pair in corpus {
        let cand_vecs: Vec<_> = (1..=4).map(|n| weigh(&pair.candidate, n)).collect();
        let mut pair_score = 0.0;
        for r in &pair.references {
            let delta = pair.candidate.len() as f64 - r.len() as f64;
            let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
            for (n, cv) in cand_vecs.iter().enumerate() {
                let rv = weigh(r, n + 1);
                let denom = norm(cv) * norm(&rv);
                if denom == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, c) in cv {
                    if let Some(rw) = rv.get(g) {
                        dot += c.min(*rw) * rw;
                    }
                }
                pair_score += penalty * dot / denom / 4.0;
            }
        }
        total += 10.0 * pair_score / pair.references.len() as f64;
    }
    total / n_images as f64
}

// ---------------------------------------------------------------------------
// Inception score

/// `exp(E_x KL(p(y|x) || p(y)))` per split; returns the mean and population
/// standard deviation across splits. `probs` holds one class distribution
/// per image.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> (f64, f64) {
    assert!(splits >= 1 && !probs.is_empty());
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        if lo == hi {
            continue;
        }
        let chunk = &probs[lo..hi];
        let classes = chunk[0].len();
        let mut marginal = vec![0.0; classes];
        for row in chunk {
            for (m, p) in marginal.iter_mut().zip(row) {
                *m += p / chunk.len() as f64;
            }
        }
        let mut kl_mean = 0.0;
        for row in chunk {
            let mut kl = 0.0;
            for (p, q) in row.iter().zip(&marginal) {
                if *p > 0.0 {
                    kl += p * (p.max(1e-12).ln() - q.max(1e-12).ln());
                }
            }
            kl_mean += kl / chunk.len() as f64;
        }
        scores.push(kl_mean.exp());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Exact binomial test

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-13 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Exact two-sided binomial test: the sum of P(X = i) over every outcome
/// no more probable than the observed one. Log-space throughout, so large
/// `n` does not underflow intermediate terms.
pub fn binomial_test_two_sided(k: u64, n: u64, p0: f64) -> f64 {
    assert!(k <= n && p0 > 0.0 && p0 < 1.0);
    let lp = |i: u64| ln_choose(n, i) + i as f64 * p0.ln() + (n - i) as f64 * (1.0 - p0).ln();
    let observed = lp(k);
    let mut pv = 0.0;
    for i in 0..=n {
        let l = lp(i);
        if l <= observed + 1e-7 {
            pv += l.exp();
        }
    }
    pv.min(1.0)
}

// ---------------------------------------------------------------------------
// Reports

/// Scores for one captioning/generation method.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider: f64,
    pub inception_mean: f64,
    pub inception_std: f64,
    pub binomial: Option<(u64, u64, f64)>,
}

impl MetricReport {
    pub fn text_metrics(corpus: &[EvalPair]) -> (f64, f64, f64, f64) {
        (bleu4(corpus), rouge_l(corpus), meteor_lite(corpus), cider_d(corpus))
    }
}

pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out =
        String::from("method,bleu4,rouge_l,meteor_lite,cider,inception_mean,inception_std,binom_k,binom_n,binom_p\n");
    for (name, r) in rows {
        let (k, n, p) = match r.binomial {
            Some((k, n, p)) => (k.to_string(), n.to_string(), format!("{p:.6e}")),
            None => (String::new(), String::new(), String::new()),
        };
        out.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{k},{n},{p}\n",
            r.bleu4, r.rouge_l, r.meteor_lite, r.cider, r.inception_mean, r.inception_std
        ));
    }
    out
}

pub fn report_table(rows: &[(String, MetricReport)]) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12}\n",
        "method", "bleu4", "rouge_l", "meteor", "cider", "inception", "binom_p"
    );
    for (name, r) in rows {
        let binom = match r.binomial {
            Some((_, _, p)) => format!("{p:.3e}"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6.3}±{:.3} {:>12}\n",
            name, r.bleu4, r.rouge_l, r.meteor_lite, r.cider, r.inception_mean, r.inception_std, binom
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn identity_pair(s: &str) -> EvalPair {
        EvalPair::new(toks(s), vec![toks(s)])
    }

    #[test]
    fn text_metrics_identity_is_one() {
        let corpus =
            vec![identity_pair("a red circle with a blue outline"), identity_pair("small green square")];
        assert_eq!(bleu4(&corpus), 1.0);
        assert_eq!(rouge_l(&corpus), 1.0);
        assert_eq!(meteor_lite(&corpus), 1.0);
    }

    #[test]
    fn disjoint_pairs_score_zero_or_tiny() {
        let corpus = vec![EvalPair::new(toks("one two three four five"), vec![toks("six seven eight nine ten")])];
        assert!(bleu4(&corpus) < 0.01);
        assert_eq!(rouge_l(&corpus), 0.0);
        assert_eq!(meteor_lite(&corpus), 0.0);
        assert_eq!(cider_d(&corpus), 0.0);
    }

    #[test]
    fn corpus_and_reference_order_invariance() {
        let p1 = EvalPair::new(
            toks("a red circle"),
            vec![toks("a red circle on gray"), toks("the circle is red")],
        );
        let p2 = EvalPair::new(toks("blue square"), vec![toks("a blue square")]);
        let fwd = vec![p1.clone(), p2.clone()];
        let mut rev = vec![p2, p1];
        for m in [bleu4, rouge_l, meteor_lite, cider_d] {
            let a = m(&fwd);
            rev.swap(0, 1);
            let b = m(&rev);
            assert!((a - b).abs() < 1e-12);
        }
        let mut shuffled_refs = fwd.clone();
        shuffled_refs[0].references.swap(0, 1);
        for m in [bleu4, rouge_l, meteor_lite, cider_d] {
            assert!((m(&fwd) - m(&shuffled_refs)).abs() < 1e-12);
        }
    }

    #[test]
    fn cider_single_image_identity_is_maximal() {
        let corpus = vec![EvalPair::new(
            toks("a red circle on a gray background"),
            vec![toks("a red circle on a gray background"); 3],
        )];
        assert!((cider_d(&corpus) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_hand_alignment_values() {
        // Pair A: identity -> 1.0.
        // Pair B: cand "a blue square on white" vs ref "the blue square sits on a mat":
        //   exact matches a->a(5), blue->1, square->2, on->4; m=4 in 3 chunks
        //   ([a], [blue square], [on]); P=4/5, R=4/7,
        //   F = PR / (0.9 P + 0.1 R), penalty = 0.5*(2/4)^3.
        // Pair C: cand "dogs running fast" vs ref "dog runs quickly":
        //   stem matches only dogs~dog; m=1, one chunk; P=R=1/3, penalty 0.
        let corpus = vec![
            identity_pair("the red circle"),
            EvalPair::new(toks("a blue square on white"), vec![toks("the blue square sits on a mat")]),
            EvalPair::new(toks("dogs running fast"), vec![toks("dog runs quickly")]),
        ];
        let (p, r) = (4.0 / 5.0, 4.0 / 7.0);
        let f_b = p * r / (0.9 * p + 0.1 * r);
        let score_b = f_b * (1.0 - 0.5 * (2.0f64 / 4.0).powi(3));
        let (p, r) = (1.0 / 3.0, 1.0 / 3.0);
        let score_c = p * r / (0.9 * p + 0.1 * r);
        let expect = (1.0 + score_b + score_c) / 3.0;
        assert!((meteor_lite(&corpus) - expect).abs() < 1e-12);
    }

    #[test]
    fn inception_uniform_is_one() {
        let probs = vec![vec![0.2; 5]; 40];
        let (mean, std) = inception_score(&probs, 4);
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(std.abs() < 1e-12);
    }

    #[test]
    fn inception_one_hot_equal_coverage_is_class_count() {
        let c = 5;
        let mut probs = Vec::new();
        for i in 0..40 {
            let mut row = vec![0.0; c];
            row[i % c] = 1.0;
            probs.push(row);
        }
        let (mean, _) = inception_score(&probs, 2);
        assert!((mean - c as f64).abs() < 1e-9, "{mean}");
    }

    #[test]
    fn binomial_reference_values() {
        let p = binomial_test_two_sided(318, 500, 0.5);
        assert!((p - 1.247e-9).abs() / 1.247e-9 < 0.01, "{p:e}");
        let p = binomial_test_two_sided(310, 500, 0.5);
        assert!((p - 8.963e-8).abs() / 8.963e-8 < 0.01, "{p:e}");
    }

    #[test]
    fn binomial_symmetry_and_mode() {
        for (k, n) in [(318u64, 500u64), (3, 10), (0, 7)] {
            let a = binomial_test_two_sided(k, n, 0.5);
            let b = binomial_test_two_sided(n - k, n, 0.5);
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(binomial_test_two_sided(250, 500, 0.5), 1.0);
    }

    #[test]
    fn bleu_brevity_penalty_applies() {
        // Candidate a strict prefix of the reference: precisions are 1 but
        // the short length must be penalized.
        let corpus =
            vec![EvalPair::new(toks("a red circle on"), vec![toks("a red circle on a gray background")])];
        let b = bleu4(&corpus);
        assert!(b < 1.0 && b > 0.0);
        let expect = (1.0 - 7.0 / 4.0f64).exp();
        assert!((b - expect).abs() < 1e-12, "{b} vs {expect}");
    }
}
