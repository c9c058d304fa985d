#![allow(dead_code)]

use std::collections::HashMap;

use ndarray::Array2;

use partial_ner::corpus::{spans_to_labels, Dataset, LabelState, Scheme, Sentence, Span, Tagset};
use partial_ner::lattice::{Constraint, Lattice, TransitionMask};
use partial_ner::losses::{batch_objective, LatentMode, LossConfig, StTerm, TrainItem};
use partial_ner::model::{Model, ModelGradient};
use partial_ner::rng::{self, Rng};

pub fn uniform(g: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit(g)
}

pub fn random_matrix(g: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| uniform(g, -scale, scale))
}

/// Random legality matrix with random start/end sets.
pub fn random_mask(g: &mut Rng, ny: usize) -> TransitionMask {
    TransitionMask {
        allowed: Array2::from_shape_fn((ny, ny), |_| rng::unit(g) < 0.7),
        start: (0..ny).map(|_| rng::unit(g) < 0.8).collect(),
        end: (0..ny).map(|_| rng::unit(g) < 0.8).collect(),
    }
}

/// Random non-empty allowed set at every position.
pub fn random_constraint(g: &mut Rng, n: usize, ny: usize) -> Constraint {
    let rows = (0..n)
        .map(|_| {
            let mut row: Vec<bool> = (0..ny).map(|_| rng::unit(g) < 0.5).collect();
            if !row.contains(&true) {
                row[rng::below(g, ny)] = true;
            }
            row
        })
        .collect();
    Constraint::from_masks(rows).unwrap()
}

/// Log partition and token marginals by listing every label sequence.
/// `None` when no sequence is allowed.
pub fn enumerate(l: &Lattice, c: Option<&Constraint>) -> Option<(f64, Array2<f64>)> {
    let (n, ny) = l.emissions.dim();
    let total = ny.pow(n as u32);
    let mut paths = Vec::new();
    for code in 0..total {
        let mut rest = code;
        let path: Vec<usize> = (0..n)
            .map(|_| {
                let y = rest % ny;
                rest /= ny;
                y
            })
            .collect();
        if let Some(c) = c {
            if !(0..n).all(|i| c.allows(i, path[i])) {
                continue;
            }
        }
        if let Some(m) = &l.mask {
            if !m.start[path[0]] || !m.end[path[n - 1]] {
                continue;
            }
            if !(1..n).all(|i| m.allowed[[path[i - 1], path[i]]]) {
                continue;
            }
        }
        let mut s = 0.0;
        for i in 0..n {
            s += l.emissions[[i, path[i]]];
            if i > 0 {
                s += l.transitions[[path[i - 1], path[i]]];
            }
        }
        paths.push((path, s));
    }
    if paths.is_empty() {
        return None;
    }
    let max = paths.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = paths.iter().map(|p| (p.1 - max).exp()).sum();
    let log_z = max + z.ln();
    let mut marg = Array2::zeros((n, ny));
    for (path, s) in &paths {
        let p = (s - log_z).exp();
        for (i, &y) in path.iter().enumerate() {
            marg[[i, y]] += p;
        }
    }
    Some((log_z, marg))
}

const VOCAB: &[&str] = &["p53", "binds", "DNA", "the", "IL-2", "a", "x1", "Kinase", "of", "BRCA1", "."];

/// Random non-overlapping typed spans over `n` tokens.
pub fn random_spans(g: &mut Rng, n: usize, types: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < n {
        if rng::unit(g) < 0.35 {
            let len = 1 + rng::below(g, 3.min(n - i));
            let t = &types[rng::below(g, types.len())];
            spans.push(Span::new(t.clone(), i, i + len));
            i += len;
        } else {
            i += 1;
        }
    }
    spans
}

pub fn random_tokens(g: &mut Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| VOCAB[rng::below(g, VOCAB.len())].to_string()).collect()
}

/// A gold sentence with random spans.
pub fn random_gold_sentence(g: &mut Rng, tagset: &Tagset, n: usize) -> (Sentence, Vec<Span>) {
    let spans = random_spans(g, n, tagset.entity_types());
    let labels = spans_to_labels(&spans, n, tagset.scheme()).unwrap();
    (Sentence::from_labels(&random_tokens(g, n), &labels, tagset).unwrap(), spans)
}

/// A gold sentence with some positions turned unknown.
pub fn random_partial_sentence(g: &mut Rng, tagset: &Tagset, n: usize, p_unknown: f64) -> Sentence {
    let (mut s, _) = random_gold_sentence(g, tagset, n);
    for st in &mut s.states {
        if rng::unit(g) < p_unknown {
            *st = LabelState::Unknown;
        }
    }
    s
}

pub fn random_tagset(g: &mut Rng) -> Tagset {
    let scheme = if rng::unit(g) < 0.5 { Scheme::Bio } else { Scheme::Bilou };
    if rng::unit(g) < 0.6 {
        Tagset::new(scheme, ["Gene"]).unwrap()
    } else {
        Tagset::new(scheme, ["Gene", "Disease"]).unwrap()
    }
}

/// A model with random weights on a small feature space, and a batch of
/// partially annotated items for it.
pub fn random_problem(g: &mut Rng, batch: usize) -> (Model, Vec<TrainItem>) {
    let tagset = random_tagset(g);
    let masked = rng::unit(g) < 0.5;
    let mut model = Model::new(tagset.clone(), 64, masked).unwrap();
    let ny = model.num_labels();
    for id in 0..64u32 {
        for w in model.emission.row_mut(id) {
            *w = uniform(g, -1.0, 1.0);
        }
    }
    model.transitions = random_matrix(g, ny, ny, 1.0);
    let mode = if rng::unit(g) < 0.5 {
        LatentMode::DistantO
    } else {
        LatentMode::ExplicitUnknown
    };
    let items = (0..batch)
        .map(|_| {
            let n = 2 + rng::below(g, 5);
            let s = random_partial_sentence(g, &tagset, n, 0.3);
            TrainItem::new(&model, &s, mode)
        })
        .collect();
    (model, items)
}

/// Central-difference check of `analytic` against `f` over every emission
/// weight touched by `items` and every transition. Returns
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
pub fn gradient_error(
    model: &Model,
    items: &[TrainItem],
    analytic: &ModelGradient,
    f: impl Fn(&Model) -> f64,
) -> f64 {
    let h = 1e-5;
    let ny = model.num_labels();
    let mut ids: Vec<u32> = items.iter().flat_map(|it| it.features.iter().flat_map(|fv| fv.ids().to_vec())).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut m = model.clone();
    let mut record = |a: f64, num: f64| {
        diff += (a - num).powi(2);
        na += a * a;
        nn += num * num;
    };
    for &id in &ids {
        for y in 0..ny {
            let w0 = model.emission.row(id)[y];
            m.emission.row_mut(id)[y] = w0 + h;
            let up = f(&m);
            m.emission.row_mut(id)[y] = w0 - h;
            let down = f(&m);
            m.emission.row_mut(id)[y] = w0;
            let a = analytic.emission.row(id).map_or(0.0, |r| r[y]);
            record(a, (up - down) / (2.0 * h));
        }
    }
    for a in 0..ny {
        for b in 0..ny {
            let t0 = model.transitions[[a, b]];
            m.transitions[[a, b]] = t0 + h;
            let up = f(&m);
            m.transitions[[a, b]] = t0 - h;
            let down = f(&m);
            m.transitions[[a, b]] = t0;
            record(analytic.transitions[[a, b]], (up - down) / (2.0 * h));
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}

/// Difference of two gradients.
pub fn grad_sub(a: &ModelGradient, b: &ModelGradient) -> ModelGradient {
    let mut out = a.clone();
    let mut neg = b.clone();
    neg.scale(-1.0);
    out.merge(&neg);
    out
}

/// Exact-match counts by pairwise comparison.
pub fn naive_counts(gold: &[Span], pred: &[Span]) -> (usize, usize, usize) {
    let tp = pred
        .iter()
        .filter(|p| {
            gold.iter().any(|g| {
                g.sentence_id == p.sentence_id && g.start == p.start && g.end == p.end && g.entity_type == p.entity_type
            })
        })
        .count();
    (tp, pred.len() - tp, gold.len() - tp)
}

/// Precision, recall and F1 from counts, zero on empty denominators.
pub fn naive_scores(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// A random gold dataset and a prediction made by perturbing its spans.
pub fn random_scoring_case(g: &mut Rng) -> (Dataset, Vec<Vec<usize>>, Vec<Span>, Vec<Span>) {
    let tagset = random_tagset(g);
    let num = 1 + rng::below(g, 6);
    let mut sentences = Vec::new();
    let mut gold_spans = Vec::new();
    let mut pred_spans = Vec::new();
    let mut preds = Vec::new();
    for sid in 0..num {
        let n = 1 + rng::below(g, 12);
        let (s, spans) = random_gold_sentence(g, &tagset, n);
        let mut pred: Vec<Span> = Vec::new();
        for sp in &spans {
            let u = rng::unit(g);
            if u < 0.5 {
                pred.push(sp.clone());
            } else if u < 0.65 {
                let t = &tagset.entity_types()[rng::below(g, tagset.entity_types().len())];
                pred.push(Span::new(t.clone(), sp.start, sp.end));
            } else if u < 0.8 && sp.len() > 1 {
                pred.push(Span::new(sp.entity_type.clone(), sp.start + 1, sp.end));
            }
        }
        // Extra predictions on tokens no kept prediction covers.
        for extra in random_spans(g, n, tagset.entity_types()) {
            if rng::unit(g) < 0.3 && pred.iter().all(|p| extra.end <= p.start || p.end <= extra.start) {
                pred.push(extra);
            }
        }
        pred.sort();
        let labels = spans_to_labels(&pred, n, tagset.scheme()).unwrap();
        preds.push(labels.iter().map(|l| tagset.index_of(l).unwrap()).collect());
        gold_spans.extend(spans.into_iter().map(|s| s.in_sentence(sid)));
        pred_spans.extend(pred.into_iter().map(|s| s.in_sentence(sid)));
        sentences.push(s);
    }
    (Dataset::new(sentences, tagset), preds, gold_spans, pred_spans)
}

/// Builds a random lattice of one of four kinds: free, random mask, BIO mask
/// or BILOU mask.
pub fn random_lattice(seed: u64, n: usize, ny: usize, kind: u8, constrained: bool) -> (Lattice, Option<Constraint>) {
    let mut g = rng::seeded(seed);
    let (ny, mask) = match kind {
        0 => (ny, None),
        1 => (ny.max(2), Some(random_mask(&mut g, ny.max(2)))),
        2 => (3, Some(Tagset::new(Scheme::Bio, ["X"]).unwrap().transition_mask())),
        _ => (5, Some(Tagset::new(Scheme::Bilou, ["X"]).unwrap().transition_mask())),
    };
    let l = Lattice::new(random_matrix(&mut g, n, ny, 3.0), random_matrix(&mut g, ny, ny, 3.0), mask).unwrap();
    let c = constrained.then(|| random_constraint(&mut g, n, ny));
    (l, c)
}

/// A differentiable part of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Pal,
    Oeer,
    St,
    Total,
}

fn pal_only() -> LossConfig {
    LossConfig {
        lambda_batch: 0.0,
        lambda_overall: 0.0,
        lambda_st: 0.0,
        ..Default::default()
    }
}

/// Finite-difference error of one term's gradient on a random problem, or
/// `None` when the point sits too close to a kink of `|·|` or `max{0, ·}`.
pub fn term_gradient_error(g: &mut Rng, term: Term) -> Option<f64> {
    let batch = 1 + rng::below(g, 3);
    let (model, items) = random_problem(g, batch);
    let refs: Vec<&TrainItem> = items.iter().collect();
    let mut cfg = pal_only();
    let mut rho_o = None;
    if matches!(term, Term::Oeer | Term::Total) {
        cfg.eer_target = uniform(g, 0.0, 0.5);
        cfg.margin = 0.02;
        cfg.lambda_batch = 1.3;
        cfg.lambda_overall = 0.7;
        rho_o = Some(uniform(g, 0.0, 0.6));
    }
    let mut masks: Vec<Vec<bool>> = items
        .iter()
        .map(|it| (0..it.features.len()).map(|_| rng::unit(g) < 0.5).collect())
        .collect();
    masks[0][0] = true;
    let st = if matches!(term, Term::St | Term::Total) {
        cfg.lambda_st = 1.5;
        StTerm::Fixed(&masks)
    } else {
        StTerm::Off
    };
    let out = batch_objective(&model, &refs, &cfg, rho_o, st).unwrap();
    let rb = out.rho_b;
    if let Some(ro) = rho_o {
        if ((rb - cfg.eer_target).abs() - cfg.margin).abs() < 1e-3 || (rb - ro).abs() < 1e-3 {
            return None;
        }
    }
    if let Some(rh) = out.rho_h {
        if (rb - rh).abs() < 1e-3 {
            return None;
        }
    }
    // Component gradients are the total minus the marginal-likelihood part.
    let analytic = match term {
        Term::Pal | Term::Total => out.grad.clone(),
        _ => {
            let base = batch_objective(&model, &refs, &pal_only(), None, StTerm::Off).unwrap();
            grad_sub(&out.grad, &base.grad)
        }
    };
    Some(gradient_error(&model, &items, &analytic, |m| {
        let o = batch_objective(m, &refs, &cfg, rho_o, st).unwrap();
        match term {
            Term::Pal => o.pal,
            Term::Oeer => o.oeer,
            Term::St => o.st,
            Term::Total => o.loss,
        }
    }))
}

/// Worst error over `count` checked instances.
pub fn worst_gradient_error(term: Term, count: usize, seed: u64) -> f64 {
    let mut g = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < count {
        if let Some(e) = term_gradient_error(&mut g, term) {
            worst = worst.max(e);
            checked += 1;
        }
    }
    worst
}

/// A gold dataset whose spans are drawn from a small pool of surface forms.
pub fn random_gold_dataset(seed: u64, sentences: usize) -> Dataset {
    let mut g = rng::seeded(seed);
    let tagset = Tagset::new(Scheme::Bilou, ["Gene", "Disease"]).unwrap();
    let ds = (0..sentences)
        .map(|_| {
            let n = 1 + rng::below(&mut g, 10);
            random_gold_sentence(&mut g, &tagset, n).0
        })
        .collect();
    Dataset::new(ds, tagset)
}

pub fn form_counts(ds: &Dataset) -> HashMap<(String, String), usize> {
    let mut m = HashMap::new();
    for sp in ds.spans().unwrap() {
        *m.entry((ds.span_text(&sp), sp.entity_type.clone())).or_default() += 1;
    }
    m
}
