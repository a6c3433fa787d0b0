//! Shared oracles for the integration tests: a central finite-difference
//! gradient checker and brute-force reimplementations of the evaluation
//! metrics, written without reference to the library's algorithms.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sclmetric::dataset::{Dataset, Sample, Subclass, SubjectRecord};
use sclmetric::evaluation::Labelled;
use sclmetric::losses::{contrastive_loss, scl_inter_loss, scl_intra_loss, triplet_loss, SclConfig, SetLabel};
use sclmetric::mining::{build_genuine_sets, build_imposter_sets};
use sclmetric::model::{init_model, Mlp};
use sclmetric::training::{scl_batch_loss, TrainConfig};

pub const FD_STEP: f64 = 1e-5;

/// Inputs closer than this to a hinge, kink or singularity are redrawn:
/// central differences straddling a non-differentiable point are meaningless.
pub const KINK_GUARD: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn sq(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..u.len() {
        s += (u[k] - v[k]) * (u[k] - v[k]);
    }
    s
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic) + norm(numeric);
    if denom == 0.0 {
        0.0
    } else {
        norm(&diff) / denom
    }
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let up = f(&probe);
            probe[k] = orig - FD_STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn split3(x: &[f64], d: usize) -> (&[f64], &[f64], &[f64]) {
    (&x[..d], &x[d..2 * d], &x[2 * d..])
}

/// Worst relative error over the checked instances.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub instances: usize,
    pub worst: f64,
}

fn check_instances(n: usize, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> Option<f64>) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n {
        if let Some(err) = instance(&mut r) {
            worst = worst.max(err);
            done += 1;
        }
    }
    GradCheck { instances: n, worst }
}

pub fn check_scl_intra(n: usize, seed: u64) -> GradCheck {
    check_instances(n, seed, |r| {
        let d = r.random_range(1..=8);
        let x = normal_vec(r, 3 * d, 1.0);
        let with_c = r.random_bool(0.8);
        let eval = |x: &[f64]| {
            let (a, b, c) = split3(x, d);
            scl_intra_loss(a, b, with_c.then_some(c)).unwrap()
        };
        let lv = eval(&x);
        let analytic: Vec<f64> = lv
            .grad_a
            .iter()
            .chain(&lv.grad_b)
            .chain(lv.grad_c.as_ref().unwrap_or(&vec![0.0; d]))
            .copied()
            .collect();
        let numeric = numeric_gradient(|x| eval(x).value, &x);
        Some(relative_error(&analytic, &numeric))
    })
}

pub fn check_scl_inter(n: usize, seed: u64) -> GradCheck {
    let cfg = SclConfig::default();
    check_instances(n, seed, |r| {
        let d = r.random_range(1..=8);
        // Scaled so that roughly half the hinges are active.
        let x = normal_vec(r, 3 * d, (cfg.alpha1 / (2.0 * d as f64)).sqrt() * 1.2);
        let (a, b, c) = split3(&x, d);
        if (sq(a, b) - cfg.alpha1).abs() < KINK_GUARD || (sq(b, c) - cfg.alpha2).abs() < KINK_GUARD {
            return None;
        }
        let eval = |x: &[f64]| {
            let (a, b, c) = split3(x, d);
            scl_inter_loss(a, b, Some(c), &cfg).unwrap()
        };
        let lv = eval(&x);
        let analytic: Vec<f64> = lv
            .grad_a
            .iter()
            .chain(&lv.grad_b)
            .chain(lv.grad_c.as_ref().unwrap())
            .copied()
            .collect();
        let numeric = numeric_gradient(|x| eval(x).value, &x);
        Some(relative_error(&analytic, &numeric))
    })
}

pub fn check_contrastive(n: usize, seed: u64) -> GradCheck {
    let margin = 2.0;
    check_instances(n, seed, |r| {
        let d = r.random_range(1..=8);
        let x = normal_vec(r, 2 * d, (2.0 / d as f64).sqrt());
        let label = if r.random_bool(0.5) { SetLabel::Genuine } else { SetLabel::Imposter };
        let dist = sq(&x[..d], &x[d..]).sqrt();
        if label == SetLabel::Imposter && (dist < KINK_GUARD || (dist - margin).abs() < KINK_GUARD) {
            return None;
        }
        let eval = |x: &[f64]| contrastive_loss(&x[..d], &x[d..], label, margin).unwrap();
        let lv = eval(&x);
        let analytic: Vec<f64> = lv.grad_a.iter().chain(&lv.grad_b).copied().collect();
        let numeric = numeric_gradient(|x| eval(x).value, &x);
        Some(relative_error(&analytic, &numeric))
    })
}

pub fn check_triplet(n: usize, seed: u64) -> GradCheck {
    let margin = 0.4;
    check_instances(n, seed, |r| {
        let d = r.random_range(1..=8);
        let x = normal_vec(r, 3 * d, (0.5 / d as f64).sqrt());
        let (a, p, q) = split3(&x, d);
        if (sq(a, p) - sq(a, q) + margin).abs() < KINK_GUARD {
            return None;
        }
        let eval = |x: &[f64]| {
            let (a, p, q) = split3(x, d);
            triplet_loss(a, p, q, margin).unwrap()
        };
        let lv = eval(&x);
        let analytic: Vec<f64> = lv
            .grad_a
            .iter()
            .chain(&lv.grad_b)
            .chain(lv.grad_c.as_ref().unwrap())
            .copied()
            .collect();
        let numeric = numeric_gradient(|x| eval(x).value, &x);
        Some(relative_error(&analytic, &numeric))
    })
}

/// Small random dataset in `dim` dimensions with two subclasses per subject.
pub fn random_dataset(r: &mut ChaCha8Rng, n_subjects: usize, dim: usize) -> Dataset {
    let subjects = (0..n_subjects as u32)
        .map(|id| {
            let mut s = SubjectRecord::new(id);
            let mean = normal_vec(r, dim, 1.0);
            for k in 0..r.random_range(1..=3u32) {
                let x: Vec<f64> = mean.iter().zip(normal_vec(r, dim, 0.3)).map(|(m, e)| m + e).collect();
                s.non_injured.push(Sample::new(id, Subclass::NonInjured, k, x.into()));
            }
            for k in 0..r.random_range(2..=4u32) {
                let x: Vec<f64> = mean.iter().zip(normal_vec(r, dim, 0.6)).map(|(m, e)| m + e).collect();
                s.injured.push(Sample::new(id, Subclass::Injured, k, x.into()));
            }
            s
        })
        .collect();
    Dataset::new(dim, subjects).unwrap()
}

/// Randomizes every parameter so biases are non-zero as well.
pub fn random_model(r: &mut ChaCha8Rng, dims: &[usize]) -> Mlp {
    let mut m = init_model(dims, r.random()).unwrap();
    for buf in m.buffers_mut() {
        for v in buf.iter_mut() {
            *v = r.random_range(-0.8..0.8);
        }
    }
    m
}

fn min_abs_preactivation(model: &Mlp, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut worst = f64::INFINITY;
    let last = model.n_layers() - 1;
    for (k, layer) in model.layers().iter().enumerate() {
        let z: Vec<f64> = (0..layer.out_dim)
            .map(|o| layer.bias[o] + (0..layer.in_dim).map(|i| layer.weights[o * layer.in_dim + i] * h[i]).sum::<f64>())
            .collect();
        if k < last {
            worst = z.iter().fold(worst, |w, v| w.min(v.abs()));
            h = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    worst
}

/// Flattened parameters in the layout of `Gradients::buffers`.
pub fn flat_params(model: &Mlp) -> Vec<f64> {
    model.layers().iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
}

pub fn set_params(model: &mut Mlp, flat: &[f64]) {
    let mut at = 0;
    for buf in model.buffers_mut() {
        let n = buf.len();
        buf.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// Batch SCL loss through a 2-layer MLP on 8-dimensional inputs versus
/// central differences on every unfrozen parameter. Frozen parameters must
/// have exactly zero gradient.
pub fn check_network(n: usize, seed: u64, frozen_layers: usize) -> GradCheck {
    let dims = [8, 6, 4];
    let cfg = TrainConfig {
        frozen_layers,
        hidden: vec![6],
        embedding_dim: 4,
        ..TrainConfig::synthetic_regime()
    };
    check_instances(n, seed, |r| {
        let ds = random_dataset(r, 4, 8);
        let model = random_model(r, &dims);
        let mine_seed: u64 = r.random();
        let genuine = build_genuine_sets(&ds, 1, mine_seed);
        let imposter = build_imposter_sets(&ds, 1, mine_seed).unwrap();

        let samples: Vec<&Sample> = ds.samples().collect();
        if samples.iter().any(|s| min_abs_preactivation(&model, &s.embedding) < KINK_GUARD) {
            return None;
        }
        let scl = cfg.scl();
        for set in &imposter {
            let ea = model.embed(&set.a.embedding).unwrap();
            let eb = model.embed(&set.b.embedding).unwrap();
            if (sq(&ea, &eb) - scl.alpha1).abs() < KINK_GUARD {
                return None;
            }
            if let Some(c) = set.c {
                let ec = model.embed(&c.embedding).unwrap();
                if (sq(&eb, &ec) - scl.alpha2).abs() < KINK_GUARD {
                    return None;
                }
            }
        }

        let (_, grads) = scl_batch_loss(&model, &genuine, &imposter, &cfg).unwrap();
        let analytic: Vec<f64> = grads.buffers().into_iter().flatten().copied().collect();
        let theta = flat_params(&model);
        let numeric = numeric_gradient(
            |p| {
                let mut m = model.clone();
                set_params(&mut m, p);
                scl_batch_loss(&m, &genuine, &imposter, &cfg).unwrap().0
            },
            &theta,
        );
        // Layer k owns buffers 2k (weights) and 2k+1 (bias).
        let frozen_len: usize = model.layers()[..frozen_layers]
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum();
        assert!(
            analytic[..frozen_len].iter().all(|&g| g == 0.0),
            "frozen parameters received gradient"
        );
        Some(relative_error(&analytic[frozen_len..], &numeric[frozen_len..]))
    })
}

// ---------------------------------------------------------------------------
// Brute-force evaluation oracles
// ---------------------------------------------------------------------------

pub fn bf_distance(u: &[f64], v: &[f64]) -> f64 {
    sq(u, v).sqrt()
}

/// Subjects ordered by closest gallery image, smaller id first on ties,
/// by repeated selection of the minimum.
pub fn bf_identify(probe: &[f64], gallery: &[(u32, Vec<f64>)]) -> Vec<u32> {
    let mut ids: Vec<u32> = Vec::new();
    for (id, _) in gallery {
        if !ids.contains(id) {
            ids.push(*id);
        }
    }
    let mut scored: Vec<(u32, f64)> = ids
        .iter()
        .map(|&id| {
            let mut best = f64::INFINITY;
            for (gid, g) in gallery {
                if *gid == id {
                    let d = bf_distance(probe, g);
                    if d < best {
                        best = d;
                    }
                }
            }
            (id, best)
        })
        .collect();
    let mut out = Vec::new();
    while !scored.is_empty() {
        let mut pick = 0;
        for k in 1..scored.len() {
            let (id, d) = scored[k];
            let (bid, bd) = scored[pick];
            if d < bd || (d == bd && id < bid) {
                pick = k;
            }
        }
        out.push(scored.remove(pick).0);
    }
    out
}

pub fn bf_cmc(rankings: &[(u32, Vec<u32>)]) -> Vec<f64> {
    let size = rankings[0].1.len();
    (1..=size)
        .map(|k| {
            let hits = rankings
                .iter()
                .filter(|(truth, ranked)| ranked[..k].contains(truth))
                .count();
            hits as f64 / rankings.len() as f64
        })
        .collect()
}

/// `(threshold, achieved FAR, GAR)` by scanning every observed score.
pub fn bf_gar_at_far(genuine: &[f64], imposter: &[f64], target: f64) -> (Option<f64>, f64, f64) {
    let count = |xs: &[f64], t: f64| xs.iter().filter(|&&s| s <= t).count();
    let mut best: Option<f64> = None;
    for &t in genuine.iter().chain(imposter) {
        let far = count(imposter, t) as f64 / imposter.len() as f64;
        if far <= target && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    match best {
        Some(t) => (
            Some(t),
            count(imposter, t) as f64 / imposter.len() as f64,
            count(genuine, t) as f64 / genuine.len() as f64,
        ),
        None => (None, 0.0, 0.0),
    }
}

pub fn bf_unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

pub fn bf_inter_class(gallery: &[(u32, Vec<f64>)], probes: &[(u32, Vec<f64>)], normalize: bool) -> f64 {
    let prep = |v: &Vec<f64>| if normalize { bf_unit(v) } else { v.clone() };
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (gi, g) in gallery {
        let g = prep(g);
        for (pi, p) in probes {
            if gi != pi {
                total += bf_distance(&g, &prep(p));
                pairs += 1;
            }
        }
    }
    total / pairs as f64
}

pub fn bf_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    let mean = s / n;
    let mut v = 0.0;
    for x in xs {
        v += (x - mean) * (x - mean);
    }
    (mean, (v / n).sqrt())
}

/// Random gallery and probe sets. Coordinates are sometimes snapped to a
/// coarse grid so that distance ties and duplicate scores actually occur.
pub fn random_eval_instance(r: &mut ChaCha8Rng) -> (Vec<Labelled>, Vec<Labelled>) {
    let n_subjects = r.random_range(2..=30u32);
    let dim = r.random_range(1..=16);
    let snap = r.random_bool(0.4);
    let point = |r: &mut ChaCha8Rng| -> Vec<f64> {
        let v = normal_vec(r, dim, 1.0);
        if snap {
            v.into_iter().map(|x| (x * 2.0).round() / 2.0).collect()
        } else {
            v
        }
    };
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    for id in 0..n_subjects {
        for _ in 0..r.random_range(1..=3) {
            gallery.push((id, point(r)));
        }
        for _ in 0..r.random_range(0..=3) {
            probes.push((id, point(r)));
        }
    }
    if probes.is_empty() {
        probes.push((0, point(r)));
    }
    (gallery, probes)
}

/// Compares every evaluation primitive against the brute-force oracles on
/// one random instance; returns a description of the first mismatch.
pub fn oracle_instance(seed: u64) -> Result<(), String> {
    use sclmetric::evaluation::{cmc_curve, gar_at_far, identify, mean_inter_class_distance, rank_k_accuracy};

    let mut r = rng(seed);
    let (gallery, probes) = random_eval_instance(&mut r);

    let mut rankings = Vec::new();
    for (truth, p) in &probes {
        let got = identify(p, &gallery).map_err(|e| e.to_string())?;
        let want = bf_identify(p, &gallery);
        if got != want {
            return Err(format!("identify: {got:?} vs {want:?}"));
        }
        rankings.push((*truth, got));
    }

    let cmc = cmc_curve(&rankings).map_err(|e| e.to_string())?;
    let want = bf_cmc(&rankings);
    if cmc.curve.values != want {
        return Err(format!("cmc: {:?} vs {want:?}", cmc.curve.values));
    }
    for k in 1..=want.len() {
        let got = rank_k_accuracy(&cmc.curve, k).map_err(|e| e.to_string())?;
        if got != want[k - 1] {
            return Err(format!("rank-{k}: {got} vs {}", want[k - 1]));
        }
    }

    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for (gi, g) in &gallery {
        for (pi, p) in &probes {
            let d = bf_distance(g, p);
            if gi == pi {
                genuine.push(d);
            } else {
                imposter.push(d);
            }
        }
    }
    if !genuine.is_empty() && !imposter.is_empty() {
        let targets = [0.001, 0.01, 0.05, 0.1, 0.3, 1.0];
        let got = gar_at_far(&genuine, &imposter, &targets).map_err(|e| e.to_string())?;
        for (g, &t) in got.iter().zip(&targets) {
            let (thr, far, gar) = bf_gar_at_far(&genuine, &imposter, t);
            if g.threshold != thr || g.achieved_far != far || g.gar != gar {
                return Err(format!("gar@far {t}: {g:?} vs ({thr:?}, {far}, {gar})"));
            }
        }
    }

    for normalize in [false, true] {
        let got = mean_inter_class_distance(&gallery, &probes, normalize).map_err(|e| e.to_string());
        let has_pair = gallery.iter().any(|(g, _)| probes.iter().any(|(p, _)| p != g));
        match got {
            Ok(v) => {
                let want = bf_inter_class(&gallery, &probes, normalize);
                if v != want {
                    return Err(format!("inter-class (normalize={normalize}): {v} vs {want}"));
                }
            }
            Err(e) if has_pair => return Err(format!("inter-class failed: {e}")),
            Err(_) => {}
        }
    }
    Ok(())
}
