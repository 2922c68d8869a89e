//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! Every check recomputes its expected values with code written here, not
//! with the library helpers under test.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use metricpad_core::bench::{generate, BenchmarkSpec};
use metricpad_core::encoder::{backward, EncoderParameters, EncoderShape};
use metricpad_core::eval::{pad_report, ScoreEntry, ScoreSet};
use metricpad_core::fewshot::{posterior_score, ReferenceSets};
use metricpad_core::losses::{
    anomaly_loss, center_loss, contrastive_loss, metric_softmax_loss, triplet_focal_loss, triplet_loss,
    ClassCenters, LossConfig, LossOutput, Pair, SoftmaxSign,
};
use metricpad_core::mining::{mine_batch, MinerConfig};
use metricpad_core::protocol::{
    evaluate, partition, run_ablation, run_protocol, HoldoutPai, PipelineConfig, ProtocolSpec, Variant,
};
use metricpad_core::{Embedding, Label, PaiType, Sample, Split, Triplet};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

// Tolerances and thresholds.
const FORMULA_TOL: f64 = 1e-12;
const FD_EPS: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-5;
const FD_POINTS: usize = 100;
const POSTERIOR_TOL: f64 = 1e-12;
const INTRA_MAX_HTER: f64 = 0.05;
const INTRA_MAX_ACER: f64 = 0.15;
const HOLDOUT_MAX_HTER: f64 = 0.25;
const PARITY_MAX_GAP: f64 = 0.02;
const TOY_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(limit_s: u64, t: Duration) -> bool {
    t < Duration::from_secs(limit_s)
}

fn unit(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sqd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn emb(v: &[f64]) -> Embedding {
    Embedding::from_vec(v.to_vec())
}

// ---------------------------------------------------------------------------
// 1. Formula fidelity
// ---------------------------------------------------------------------------

/// Threshold choice and rates recounted from scratch.
struct Recount {
    threshold: f64,
    far: f64,
    frr: f64,
}

fn recount_eer(entries: &[ScoreEntry]) -> Recount {
    let mut scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
    cands.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let g = entries.iter().filter(|e| e.genuine).count() as i128;
    let a = entries.len() as i128 - g;
    let counts = |t: f64| {
        let fa = entries.iter().filter(|e| !e.genuine && e.score >= t).count() as i128;
        let fr = entries.iter().filter(|e| e.genuine && e.score < t).count() as i128;
        (fa, fr)
    };
    // Compare FAR − FRR and FAR + FRR over the common denominator A·G.
    let key = |t: f64| {
        let (fa, fr) = counts(t);
        ((fa * g - fr * a).abs(), fa * g + fr * a)
    };
    let best = cands
        .iter()
        .copied()
        .min_by(|&x, &y| key(x).cmp(&key(y)).then(x.total_cmp(&y)))
        .unwrap();
    let (fa, fr) = counts(best);
    Recount {
        threshold: best,
        far: fa as f64 / a as f64,
        frr: fr as f64 / g as f64,
    }
}

fn rates_at(entries: &[ScoreEntry], t: f64) -> (f64, f64, BTreeMap<PaiType, f64>) {
    let genuine: Vec<_> = entries.iter().filter(|e| e.genuine).collect();
    let attacks: Vec<_> = entries.iter().filter(|e| !e.genuine).collect();
    let far = attacks.iter().filter(|e| e.score >= t).count() as f64 / attacks.len() as f64;
    let frr = genuine.iter().filter(|e| e.score < t).count() as f64 / genuine.len() as f64;
    let mut per: BTreeMap<PaiType, (usize, usize)> = BTreeMap::new();
    for e in attacks {
        let slot = per.entry(e.pai_type.unwrap()).or_default();
        slot.0 += usize::from(e.score >= t);
        slot.1 += 1;
    }
    let apcer = per.into_iter().map(|(k, (acc, n))| (k, acc as f64 / n as f64)).collect();
    (far, frr, apcer)
}

fn random_scores(rng: &mut StdRng, prefix: &str) -> Vec<ScoreEntry> {
    let n = rng.random_range(4..60);
    // A coarse grid some of the time, to force ties.
    let grid = rng.random_bool(0.5);
    let mut out: Vec<ScoreEntry> = (0..n)
        .map(|i| {
            let genuine = rng.random_bool(0.4);
            let shift = if genuine { 0.3 } else { 0.0 };
            let raw: f64 = rng.random_range(0.0..1.0) + shift;
            let score = if grid { (raw * 8.0).round() / 8.0 } else { raw };
            let pai_type = (!genuine).then(|| PaiType::ALL[rng.random_range(0..3)]);
            ScoreEntry {
                id: format!("{prefix}{i}"),
                score,
                raw_score: score,
                genuine,
                pai_type,
                pai_subtype: None,
            }
        })
        .collect();
    out[0].genuine = true;
    out[0].pai_type = None;
    out[1].genuine = false;
    out[1].pai_type = Some(PaiType::Mask);
    out
}

fn criterion_formulas() -> Outcome {
    let mut rng = StdRng::seed_from_u64(101);
    let cfg = LossConfig::default();
    let ln2 = std::f64::consts::LN_2;

    // D_ap = D_an exactly: the anchor is zero in coordinate 0 and the
    // negative is the positive with that coordinate negated.
    let mut softmax_err = 0.0f64;
    let mut focal_err = 0.0f64;
    for _ in 0..200 {
        let mut a = unit(&mut rng, 5);
        a[0] = 0.0;
        let p = unit(&mut rng, 5);
        let mut n = p.clone();
        n[0] = -n[0];
        assert_eq!(sqd(&a, &p), sqd(&a, &n));
        let table = vec![emb(&a), emb(&p), emb(&n)];
        let t = [Triplet::new(0, 1, 2)];
        for sign in [SoftmaxSign::Corrected, SoftmaxSign::PaperLiteral] {
            let v = metric_softmax_loss(&table, &t, sign).unwrap().value;
            softmax_err = softmax_err.max((v - ln2).abs());
        }
        let same = vec![emb(&a), emb(&a), emb(&a)];
        let v = triplet_focal_loss(&same, &t, cfg.margin, cfg.sigma).unwrap().value;
        focal_err = focal_err.max((v - cfg.margin).abs());
    }
    // Several triplets at once: value is ln 2 per triplet.
    let a = unit(&mut rng, 5);
    let table = vec![emb(&a), emb(&a), emb(&a)];
    let ts = vec![Triplet::new(0, 1, 2); 7];
    let v = metric_softmax_loss(&table, &ts, SoftmaxSign::Corrected).unwrap().value;
    softmax_err = softmax_err.max((v / 7.0 - ln2).abs());

    let mut mismatches = 0;
    for _ in 0..1000 {
        let dev = random_scores(&mut rng, "d");
        let test = random_scores(&mut rng, "t");
        let report = pad_report(&ScoreSet::new(dev.clone()), &ScoreSet::new(test.clone())).unwrap();
        let eer = recount_eer(&dev);
        let (far, frr, apcer) = rates_at(&test, eer.threshold);
        let apcer_max = apcer.values().copied().fold(0.0, f64::max);
        let same_threshold = report.threshold == eer.threshold
            || (report.threshold - eer.threshold).abs() <= 1e-12 * eer.threshold.abs().max(1.0);
        let ok = same_threshold
            && report.far == far
            && report.frr == frr
            && report.hter == (far + frr) / 2.0
            && report.bpcer == frr
            && report.apcer_max == apcer_max
            && report.acer == (apcer_max + frr) / 2.0
            && report.dev_far == eer.far
            && report.dev_frr == eer.frr
            && report.aer == (eer.far + eer.frr) / 2.0;
        mismatches += usize::from(!ok);
    }
    let pass = softmax_err <= FORMULA_TOL && focal_err <= FORMULA_TOL && mismatches == 0;
    outcome(
        pass,
        format!(
            "softmax |L - ln2| {softmax_err:.1e}, focal |L - m| {focal_err:.1e}, report mismatches {mismatches}/1000"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Gradient suite
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Case {
    Center,
    Contrastive,
    Triplet,
    Focal,
    SoftmaxCorrected,
    SoftmaxPaper,
    Anomaly,
}

const CASES: [Case; 7] = [
    Case::Center,
    Case::Contrastive,
    Case::Triplet,
    Case::Focal,
    Case::SoftmaxCorrected,
    Case::SoftmaxPaper,
    Case::Anomaly,
];

const CONTRASTIVE_MARGIN: f64 = 1.0;

struct Ctx {
    triplets: Vec<Triplet>,
    pairs: Vec<Pair>,
    classes: Vec<u32>,
    centers: ClassCenters,
}

fn random_ctx(rng: &mut StdRng, rows: usize, dim: usize) -> Ctx {
    let distinct = |rng: &mut StdRng| loop {
        let t = Triplet::new(rng.random_range(0..rows), rng.random_range(0..rows), rng.random_range(0..rows));
        if t.is_distinct() {
            return t;
        }
    };
    let triplets = (0..4).map(|_| distinct(rng)).collect();
    let pairs = (0..6)
        .map(|_| {
            let t = distinct(rng);
            Pair {
                first: t.anchor,
                second: t.positive,
                positive: rng.random_bool(0.5),
            }
        })
        .collect();
    let classes = (0..rows).map(|_| rng.random_range(0..3)).collect();
    let mut centers = ClassCenters::default();
    for c in 0..3 {
        centers.centers.insert(c, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    Ctx {
        triplets,
        pairs,
        classes,
        centers,
    }
}

fn loss_of(case: Case, ctx: &Ctx, table: &[Embedding]) -> LossOutput {
    let cfg = LossConfig::default();
    match case {
        Case::Center => center_loss(table, &ctx.classes, &ctx.centers),
        Case::Contrastive => contrastive_loss(table, &ctx.pairs, CONTRASTIVE_MARGIN),
        Case::Triplet => triplet_loss(table, &ctx.triplets, cfg.margin),
        Case::Focal => triplet_focal_loss(table, &ctx.triplets, cfg.margin, cfg.sigma),
        Case::SoftmaxCorrected => metric_softmax_loss(table, &ctx.triplets, SoftmaxSign::Corrected),
        Case::SoftmaxPaper => metric_softmax_loss(table, &ctx.triplets, SoftmaxSign::PaperLiteral),
        Case::Anomaly => anomaly_loss(table, &ctx.triplets, &cfg),
    }
    .unwrap()
}

/// Rows that receive gradient from at least one active term, or `None` when a
/// hinge sits too close to its kink for a central difference.
fn active_rows(case: Case, ctx: &Ctx, table: &[Embedding]) -> Option<Vec<bool>> {
    let cfg = LossConfig::default();
    let d = |i: usize, j: usize| sqd(table[i].as_slice(), table[j].as_slice());
    let mut used = vec![false; table.len()];
    let mut mark = |t: &Triplet| {
        used[t.anchor] = true;
        used[t.positive] = true;
        used[t.negative] = true;
    };
    match case {
        Case::Center => return Some(vec![true; table.len()]),
        Case::Contrastive => {
            for p in &ctx.pairs {
                let dd = d(p.first, p.second);
                if !p.positive && (dd - CONTRASTIVE_MARGIN).abs() <= 1e-3 {
                    return None;
                }
                if p.positive || dd < CONTRASTIVE_MARGIN {
                    used[p.first] = true;
                    used[p.second] = true;
                }
            }
        }
        Case::Triplet => {
            for t in &ctx.triplets {
                let h = d(t.anchor, t.positive) - d(t.anchor, t.negative) + cfg.margin;
                if h.abs() <= 1e-3 {
                    return None;
                }
                if h > 0.0 {
                    mark(t);
                }
            }
        }
        Case::Focal | Case::Anomaly => {
            for t in &ctx.triplets {
                let (ea, en) = ((d(t.anchor, t.positive) / cfg.sigma).exp(), (d(t.anchor, t.negative) / cfg.sigma).exp());
                let h = ea - en + cfg.margin;
                if h.abs() <= 1e-3 * (ea + en).max(1.0) {
                    return None;
                }
                if h > 0.0 || matches!(case, Case::Anomaly) {
                    mark(t);
                }
            }
        }
        Case::SoftmaxCorrected | Case::SoftmaxPaper => ctx.triplets.iter().for_each(&mut mark),
    }
    Some(used)
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + FD_EPS;
            let up = f(&probe);
            probe[k] = x[k] - FD_EPS;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Non-degenerate: every coordinate that is not structurally zero is at
/// least `1e-3·max(1, |L|)` in magnitude, so that central-difference rounding
/// stays far below the tested relative error.
fn resolvable(grad: &[f64], structural_zero: &[bool], value: f64) -> bool {
    let floor = 1e-3 * value.abs().max(1.0);
    grad.iter().zip(structural_zero).all(|(g, z)| *z || g.abs() >= floor)
}

fn table_from(flat: &[f64], dim: usize) -> Vec<Embedding> {
    flat.chunks(dim).map(emb).collect()
}

fn loss_level(case: Case, seed: u64) -> Result<f64, String> {
    let (rows, dim) = (7, 4);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    for _ in 0..200_000 {
        if accepted == FD_POINTS {
            return Ok(worst);
        }
        let flat: Vec<f64> = (0..rows).flat_map(|_| unit(&mut rng, dim)).collect();
        let table = table_from(&flat, dim);
        let ctx = random_ctx(&mut rng, rows, dim);
        let Some(used) = active_rows(case, &ctx, &table) else { continue };
        let out = loss_of(case, &ctx, &table);
        let analytic: Vec<f64> = out.gradients.concat();
        let zero: Vec<bool> = (0..rows * dim).map(|k| !used[k / dim]).collect();
        if !resolvable(&analytic, &zero, out.value) {
            continue;
        }
        let f = |x: &[f64]| loss_of(case, &ctx, &table_from(x, dim)).value;
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flat)));
        accepted += 1;
    }
    Err(format!("{case:?}: only {accepted} non-degenerate points found"))
}

fn flatten(params: &EncoderParameters) -> Vec<f64> {
    params.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

fn unflatten(template: &EncoderParameters, flat: &[f64]) -> EncoderParameters {
    let mut p = template.clone();
    let mut k = 0;
    for l in &mut p.layers {
        for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
            *w = flat[k];
            k += 1;
        }
    }
    p
}

/// Hidden pre-activations, row-major weights, computed here independently.
fn hidden_preacts(params: &EncoderParameters, x: &[f64]) -> Vec<Vec<f64>> {
    let mut h = x.to_vec();
    let mut out = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        let z: Vec<f64> = (0..l.outputs)
            .map(|j| (0..l.inputs).map(|k| l.weights[j * l.inputs + k] * h[k]).sum::<f64>() + l.bias[j])
            .collect();
        if i + 1 < params.layers.len() {
            h = z.iter().map(|v| v.max(0.0)).collect();
            out.push(z);
        }
    }
    out
}

fn encoder_level(case: Case, seed: u64) -> Result<f64, String> {
    let (rows, input, hidden, output) = (7, 4, vec![6, 5], 3);
    let shape = EncoderShape::new(input, hidden, output);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    for _ in 0..200_000 {
        if accepted == FD_POINTS {
            return Ok(worst);
        }
        let mut params = EncoderParameters::init(&shape, &mut rng).unwrap();
        for l in &mut params.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        assert_eq!(params.layers.len(), 3);
        let xs: Vec<Vec<f64>> = (0..rows).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ctx = random_ctx(&mut rng, rows, output);

        let pre: Vec<Vec<Vec<f64>>> = xs.iter().map(|x| hidden_preacts(&params, x)).collect();
        if pre.iter().flatten().flatten().any(|z| z.abs() <= 1e-3) {
            continue;
        }
        let table = params.embed_all(batch.iter().copied()).unwrap();
        let Some(used) = active_rows(case, &ctx, &table) else { continue };
        let out = loss_of(case, &ctx, &table);
        let grads = backward(&params, &batch, &out.gradients).unwrap();
        let analytic: Vec<f64> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect();

        // A coordinate is structurally zero when no used row reaches it:
        // its unit is off, or its input activation is zero, on every used row.
        let mut zero = Vec::with_capacity(analytic.len());
        for (li, l) in params.layers.iter().enumerate() {
            let unit_on = |i: usize, j: usize| li + 1 == params.layers.len() || pre[i][li][j] > 0.0;
            let input_of = |i: usize, k: usize| if li == 0 { xs[i][k] } else { pre[i][li - 1][k].max(0.0) };
            for j in 0..l.outputs {
                for k in 0..l.inputs {
                    zero.push((0..rows).all(|i| !used[i] || !unit_on(i, j) || input_of(i, k) == 0.0));
                }
            }
            for j in 0..l.outputs {
                zero.push((0..rows).all(|i| !used[i] || !unit_on(i, j)));
            }
        }
        if !resolvable(&analytic, &zero, out.value) {
            continue;
        }
        let flat = flatten(&params);
        let f = |theta: &[f64]| {
            let p = unflatten(&params, theta);
            loss_of(case, &ctx, &p.embed_all(batch.iter().copied()).unwrap()).value
        };
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flat)));
        accepted += 1;
    }
    Err(format!("{case:?}: only {accepted} non-degenerate encoder points found"))
}

fn criterion_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (i, case) in CASES.into_iter().enumerate() {
        for (level, r) in [
            ("loss", loss_level(case, 200 + i as u64)),
            ("encoder", encoder_level(case, 300 + i as u64)),
        ] {
            match r {
                Ok(e) => {
                    worst = worst.max(e);
                    parts.push(format!("{case:?}/{level} {e:.1e}"));
                }
                Err(msg) => failures.push(msg),
            }
        }
    }
    let pass = failures.is_empty() && worst < FD_MAX_REL;
    let mut detail = format!("max relative error {worst:.2e} over {} suites", parts.len());
    if !failures.is_empty() {
        detail.push_str(&format!("; {}", failures.join("; ")));
    }
    if !pass {
        detail.push_str(&format!(" [{}]", parts.join(", ")));
    }
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 3. Mining
// ---------------------------------------------------------------------------

fn random_sample(rng: &mut StdRng, i: usize, genuine: bool, dim: usize) -> Sample {
    let label = if genuine {
        Label::Genuine
    } else {
        let t = PaiType::ALL[i % 3];
        Label::attack(t, t.subtypes()[i % t.subtypes().len()]).unwrap()
    };
    Sample {
        id: format!("s{i}"),
        features: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        label,
        domain_tag: "d".into(),
        split: Split::Train,
    }
}

fn criterion_mining() -> Outcome {
    let mut rng = StdRng::seed_from_u64(303);
    let samples: Vec<Sample> = (0..40).map(|i| random_sample(&mut rng, i, i < 12, 8)).collect();
    let pool: Vec<&Sample> = samples.iter().collect();
    let encoder = EncoderParameters::init(&EncoderShape::default_for(8), &mut rng).unwrap();
    let cfg = MinerConfig::default();
    let genuine: Vec<bool> = pool.iter().map(|s| s.label.is_genuine()).collect();

    let (mut total, mut satisfied, mut fallbacks, mut reported_fallbacks, mut bad_labels) = (0, 0, 0, 0, 0);
    let mut per_pair: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    let mut sets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for _ in 0..1000 {
        let batch = mine_batch(&encoder, &pool, &cfg, &mut rng).unwrap();
        reported_fallbacks += batch.stats.fallback_count;
        let e = &batch.embeddings;
        for t in &batch.triplets {
            total += 1;
            if !(genuine[t.anchor] && genuine[t.positive] && !genuine[t.negative]) {
                bad_labels += 1;
            }
            let d_ap = sqd(e[t.anchor].as_slice(), e[t.positive].as_slice());
            let set: Vec<usize> = (0..pool.len())
                .filter(|&n| !genuine[n] && d_ap - sqd(e[t.anchor].as_slice(), e[n].as_slice()) < cfg.margin)
                .collect();
            if set.is_empty() {
                fallbacks += 1;
                continue;
            }
            if set.contains(&t.negative) {
                satisfied += 1;
            }
            *per_pair.entry((t.anchor, t.positive)).or_default().entry(t.negative).or_insert(0) += 1;
            sets.insert((t.anchor, t.positive), set);
        }
    }
    // Each pair's negatives are a multinomial over its satisfying set; the
    // per-negative totals are sums of independent multinomial components.
    let mut expected = vec![0.0f64; pool.len()];
    let mut variance = vec![0.0f64; pool.len()];
    let mut observed = vec![0usize; pool.len()];
    for (key, seen) in &per_pair {
        let set = &sets[key];
        let n: usize = seen.values().sum();
        let q = 1.0 / set.len() as f64;
        for &neg in set {
            expected[neg] += n as f64 * q;
            variance[neg] += n as f64 * q * (1.0 - q);
            observed[neg] += seen.get(&neg).copied().unwrap_or(0);
        }
    }
    let worst_z = (0..pool.len())
        .filter(|&n| variance[n] > 0.0)
        .map(|n| (observed[n] as f64 - expected[n]).abs() / variance[n].sqrt())
        .fold(0.0, f64::max);
    let non_fallback = total - fallbacks;
    let pass = total > 0
        && satisfied == non_fallback
        && bad_labels == 0
        && fallbacks == reported_fallbacks
        && worst_z <= 3.0;
    outcome(
        pass,
        format!(
            "{total} triplets, {satisfied}/{non_fallback} non-fallback satisfy the margin, {bad_labels} label violations, \
             {fallbacks} fallbacks (reported {reported_fallbacks}), worst negative |z| {worst_z:.2}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Few-shot estimator
// ---------------------------------------------------------------------------

fn refs_of(genuine: Vec<Vec<f64>>, attacks: Vec<Vec<f64>>) -> ReferenceSets {
    let m = genuine.len();
    ReferenceSets {
        genuine: genuine.iter().map(|v| emb(v)).collect(),
        attacks: attacks.iter().map(|v| emb(v)).collect(),
        genuine_ids: (0..m).map(|i| format!("g{i}")).collect(),
        attack_ids: (0..m).map(|i| format!("a{i}")).collect(),
        attack_types: (0..m).map(|i| PaiType::ALL[i % 3]).collect(),
    }
}

fn oracle_posterior(probe: &[f64], refs: &ReferenceSets, sign: SoftmaxSign) -> f64 {
    let m = refs.genuine.len();
    let raw: f64 = (0..m)
        .map(|k| {
            let dg = sqd(probe, refs.genuine[k].as_slice()).exp();
            let dh = sqd(probe, refs.attacks[k].as_slice()).exp();
            match sign {
                SoftmaxSign::Corrected => dh / (dg + dh),
                SoftmaxSign::PaperLiteral => dg / (dg + dh),
            }
        })
        .sum();
    raw / m as f64
}

fn criterion_fewshot() -> Outcome {
    let mut rng = StdRng::seed_from_u64(404);
    let dim = 6;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let m = rng.random_range(1..=9);
        let refs = refs_of(
            (0..m).map(|_| unit(&mut rng, dim)).collect(),
            (0..m).map(|_| unit(&mut rng, dim)).collect(),
        );
        let probe = unit(&mut rng, dim);
        let sign = if i % 2 == 0 { SoftmaxSign::Corrected } else { SoftmaxSign::PaperLiteral };
        let got = posterior_score(&emb(&probe), &refs, sign);
        let want = oracle_posterior(&probe, &refs, sign);
        worst = worst.max((got.score - want).abs()).max((got.raw - want * m as f64).abs());
    }

    // Moving a probe so that no genuine distance grows and no attack distance
    // shrinks must not lower the corrected score, and vice versa.
    let (mut tested, mut violations) = (0, 0);
    for _ in 0..20_000 {
        let m = rng.random_range(1..=3);
        let refs = refs_of(
            (0..m).map(|_| unit(&mut rng, dim)).collect(),
            (0..m).map(|_| unit(&mut rng, dim)).collect(),
        );
        let p = unit(&mut rng, dim);
        let step: f64 = rng.random_range(0.01..0.5);
        let q: Vec<f64> = p
            .iter()
            .zip(refs.genuine[0].as_slice())
            .zip(refs.attacks[0].as_slice())
            .map(|((x, g), h)| x + step * (g - h) + rng.random_range(-0.05..0.05))
            .collect();
        let dist = |v: &[f64]| -> (Vec<f64>, Vec<f64>) {
            (
                refs.genuine.iter().map(|g| sqd(v, g.as_slice())).collect(),
                refs.attacks.iter().map(|h| sqd(v, h.as_slice())).collect(),
            )
        };
        let ((gp, hp), (gq, hq)) = (dist(&p), dist(&q));
        let better = gq.iter().zip(&gp).all(|(a, b)| a <= b) && hq.iter().zip(&hp).all(|(a, b)| a >= b);
        let worse = gq.iter().zip(&gp).all(|(a, b)| a >= b) && hq.iter().zip(&hp).all(|(a, b)| a <= b);
        if !(better || worse) {
            continue;
        }
        tested += 1;
        let (sp, sq) = (
            posterior_score(&emb(&p), &refs, SoftmaxSign::Corrected).score,
            posterior_score(&emb(&q), &refs, SoftmaxSign::Corrected).score,
        );
        if (better && sq < sp) || (worse && sq > sp) {
            violations += 1;
        }
    }
    let pass = worst <= POSTERIOR_TOL && violations == 0 && tested >= 1000;
    outcome(
        pass,
        format!("max |score - oracle| {worst:.1e} over 1000 probes; monotonicity {violations} violations in {tested} perturbations"),
    )
}

// ---------------------------------------------------------------------------
// 5–8. Toy-scale experiments
// ---------------------------------------------------------------------------

fn toy_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.train.seed = seed;
    cfg
}

struct ToyRuns {
    intra_hter: f64,
    c5: Outcome,
    c8: Outcome,
}

fn criteria_intra() -> ToyRuns {
    let start = Instant::now();
    let bench = generate(&BenchmarkSpec::grandtest_toy(TOY_SEED)).unwrap();
    let cfg = toy_config(TOY_SEED);
    let spec = ProtocolSpec::intra();
    let run = run_protocol(&bench, &spec, &cfg).unwrap();
    let r = &run.evaluation.report;
    let elapsed = start.elapsed();
    let c5 = outcome(
        r.hter <= INTRA_MAX_HTER && r.acer <= INTRA_MAX_ACER && within(600, elapsed),
        format!(
            "test HTER {:.4} (<= {INTRA_MAX_HTER}), ACER {:.4} (<= {INTRA_MAX_ACER}), {} epochs in {:.1} s",
            r.hter,
            r.acer,
            run.outcome.history.len(),
            elapsed.as_secs_f64()
        ),
    );

    let part = partition(&bench, &spec).unwrap();
    let hter_at = |m: usize| {
        let mut c = cfg.clone();
        c.references = m;
        evaluate(&run.outcome.params, &part, &c).unwrap().report.hter
    };
    let (h3, h9) = (hter_at(3), hter_at(9));
    let c8 = outcome(
        (h3 - h9).abs() <= PARITY_MAX_GAP,
        format!("test HTER M=3 {h3:.4}, M=9 {h9:.4}, gap {:.4} (<= {PARITY_MAX_GAP})", (h3 - h9).abs()),
    );
    ToyRuns {
        intra_hter: r.hter,
        c5,
        c8,
    }
}

fn criterion_holdout(intra_hter: f64) -> Outcome {
    let bench = generate(&BenchmarkSpec::grandtest_toy(TOY_SEED)).unwrap();
    let cfg = toy_config(TOY_SEED);
    let mut pass = true;
    let mut parts = Vec::new();
    for t in PaiType::ALL {
        let spec = ProtocolSpec::holdout_pai(HoldoutPai {
            pai_type: t,
            pai_subtype: None,
        });
        let hter = run_protocol(&bench, &spec, &cfg).unwrap().evaluation.report.hter;
        pass &= hter <= HOLDOUT_MAX_HTER && hter - intra_hter >= 0.0;
        parts.push(format!("{t} {hter:.4}"));
    }
    outcome(
        pass,
        format!("holdout HTER {} vs intra {intra_hter:.4} (each <= {HOLDOUT_MAX_HTER} and >= intra)", parts.join(", ")),
    )
}

fn criterion_ablation() -> Outcome {
    let start = Instant::now();
    let bench = generate(&BenchmarkSpec::grandtest_toy(TOY_SEED)).unwrap();
    let mut aers: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for seed in 1..=5 {
        for row in run_ablation(&bench, &ProtocolSpec::intra(), &toy_config(seed)).unwrap() {
            aers.entry(row.variant.name()).or_default().push(row.aer);
        }
    }
    let median = |v: Variant| {
        let mut xs = aers[v.name()].clone();
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    };
    let (base, m1, m2, ours) = (
        median(Variant::Baseline),
        median(Variant::Model1),
        median(Variant::Model2),
        median(Variant::Ours),
    );
    let elapsed = start.elapsed();
    outcome(
        ours < m2 && m2 < base && m1 < base && within(3600, elapsed),
        format!(
            "median dev AER ours {ours:.4} < model-2 {m2:.4} < baseline {base:.4}, model-1 {m1:.4} < baseline; {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Replay from manifests
// ---------------------------------------------------------------------------

const SMALL_CONFIG: &str = r#"
seed = 11

[benchmark.spec]
input_dim = 4
splits = { train = 0.5, dev = 0.2, test = 0.3 }
genuine = { components = 1, count = 120, spread = 0.3, center_scale = 1.0 }
domains = [{ tag = "a", offset_scale = 0.2 }, { tag = "b", offset_scale = 0.2 }]
attacks = [
  { pai_type = "print", pai_subtype = "low", mean_scale = 2.5, cov_scale = 0.5, count = 40 },
  { pai_type = "replay", pai_subtype = "high", mean_scale = 2.0, cov_scale = 0.6, count = 40 },
  { pai_type = "mask", pai_subtype = "silicone", mean_scale = 1.8, cov_scale = 0.7, count = 40 },
]

[train]
epochs = 3

[train.encoder]
hidden = [16]
output_dim = 8

[train.miner]
pool_size = 48
triplets_per_batch = 16
"#;

fn metricpad(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_metricpad"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn outputs(manifest: &Path) -> BTreeMap<String, String> {
    let text = std::fs::read_to_string(manifest).unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
    v["outputs"]
        .as_object()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.as_str().unwrap_or("").to_string())).collect())
        .unwrap_or_default()
}

fn criterion_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.toml");
    std::fs::write(&cfg_path, SMALL_CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (a_s, b_s, cfg_s) = (a.to_str().unwrap(), b.to_str().unwrap(), cfg_path.to_str().unwrap());

    let mut compared = 0;
    let mut problems = Vec::new();
    for cmd in ["generate", "train", "evaluate", "ablation"] {
        if !metricpad(&[cmd, "--config", cfg_s, "--out", a_s]) {
            problems.push(format!("{cmd} failed"));
            continue;
        }
        let manifest = a.join(format!("manifest-{cmd}.json"));
        if !metricpad(&[cmd, "--config", manifest.to_str().unwrap(), "--out", b_s]) {
            problems.push(format!("{cmd} replay failed"));
            continue;
        }
        let first = outputs(&manifest);
        if first.is_empty() {
            problems.push(format!("{cmd}: manifest lists no outputs"));
        }
        for name in first.keys() {
            let (x, y) = (std::fs::read(a.join(name)), std::fs::read(b.join(name)));
            match (x, y) {
                (Ok(x), Ok(y)) if x == y => compared += 1,
                _ => problems.push(format!("{cmd}: {name} differs")),
            }
        }
        if outputs(&b.join(format!("manifest-{cmd}.json"))) != first {
            problems.push(format!("{cmd}: output digests differ"));
        }
    }
    let pass = problems.is_empty() && compared > 0;
    let mut detail = format!("{compared} output files byte-identical after replay");
    if !problems.is_empty() {
        detail.push_str(&format!("; {}", problems.join("; ")));
    }
    outcome(pass, detail)
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, limit_s: Option<u64>, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let t = start.elapsed();
        if let Some(limit) = limit_s {
            if !within(limit, t) {
                o.pass = false;
                o.detail.push_str(&format!("; over the {limit} s budget"));
            }
        }
        print_line(n, name, &o, t);
        results.push((n, name, o, t));
    };
    timed(1, "formula fidelity", Some(10), &criterion_formulas);
    timed(2, "gradient suite", Some(60), &criterion_gradients);
    timed(3, "mining correctness", Some(60), &criterion_mining);
    timed(4, "few-shot estimator", None, &criterion_fewshot);

    let start = Instant::now();
    let toy = criteria_intra();
    let t = start.elapsed();
    print_line(5, "intra separability", &toy.c5, t);
    let holdout_start = Instant::now();
    let c6 = criterion_holdout(toy.intra_hter);
    let t6 = holdout_start.elapsed();
    print_line(6, "holdout generalization", &c6, t6);
    let start7 = Instant::now();
    let c7 = criterion_ablation();
    print_line(7, "ablation ordering", &c7, start7.elapsed());
    print_line(8, "few-shot parity M=3 vs M=9", &toy.c8, Duration::ZERO);
    let start9 = Instant::now();
    let c9 = criterion_replay();
    print_line(9, "manifest replay", &c9, start9.elapsed());

    let failed = results.iter().filter(|r| !r.2.pass).count()
        + [&toy.c5, &c6, &c7, &toy.c8, &c9].iter().filter(|o| !o.pass).count();
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn print_line(n: usize, name: &str, o: &Outcome, t: Duration) {
    println!(
        "{} [{n}] {name}: {} ({:.1} s)",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.as_secs_f64()
    );
}
