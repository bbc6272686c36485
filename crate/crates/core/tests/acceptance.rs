//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use gpd_core::autograd::{Mat, Tape};
use gpd_core::denoiser::{ops, Denoiser};
use gpd_core::diffusion::{make_schedule, q_sample, sample_with, CountingNoise, GaussianNoise};
use gpd_core::harness::{intra_inter, run_pipeline, run_variant, Variant};
use gpd_core::predictor::{prepare_source_checkpoints, Predictor};
use gpd_core::prompt::{
    build_ukg, mask_count, sample_mask, train_masked_ae, train_tucker, MaskedAeConfig, Relation, TuckerConfig,
};
use gpd_core::stgraph::{generate_synthetic_cities, split_few_shot};
use gpd_core::tokenizer::{detokenize, fixtures, tokenize_flat, TokenLayout};
use gpd_core::{
    DenoiserConfig, ExperimentConfig, LayerDescriptor, LayerKind, PredictorConfig, RunReport, Strategy,
    SyntheticCitySpec,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------

fn tokenizer_round_trip() -> Outcome {
    let tables = [
        ("stid", PredictorConfig::default().descriptors()),
        ("stgcn", fixtures::stgcn()),
        ("gwn", fixtures::gwn()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut notes = Vec::new();
    for i in 0..100 {
        let (name, table) = &tables[i % 3];
        let numels: Vec<usize> = table.iter().map(LayerDescriptor::numel).collect();
        let g = numels.iter().copied().fold(0, gcd);
        let l: usize = table.iter().map(|d| d.count * d.numel() / g).sum();
        let total: usize = table.iter().map(|d| d.count * d.numel()).sum();
        let flat: Vec<f64> = (0..total).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>()).collect();
        let seq = tokenize_flat(&flat, table).map_err(e2s)?;
        ensure(seq.width == g && seq.len() == l && seq.tokens.dim() == (l, g), || {
            format!("{name}: got L={} g={}, expected L={l} g={g}", seq.len(), seq.width)
        })?;
        let back = detokenize(&seq, table).map_err(e2s)?;
        ensure(back.iter().zip(&flat).all(|(a, b)| a.to_bits() == b.to_bits()) && back.len() == flat.len(), || {
            format!("{name}: round trip not bit-exact")
        })?;
        if i < 3 {
            notes.push(format!("{name} L={l} g={g}"));
        }
    }
    Ok(notes.join(", "))
}

fn forward_statistics() -> Outcome {
    let s = make_schedule(500, 1e-4, 0.02).map_err(e2s)?;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // x0 with variance 4 so the check is not trivially 1
    let x0 = randn(&mut rng, n, 1) * 2.0;
    let m0 = x0.mean().unwrap();
    let var0 = x0.mapv(|v| (v - m0).powi(2)).mean().unwrap();
    let mut out = Vec::new();
    for k in [1, 250, 500] {
        let eps = randn(&mut rng, n, 1);
        let xk = q_sample(&s, &x0, k, &eps).map_err(e2s)?;
        let m = xk.mean().unwrap();
        let var = xk.mapv(|v| (v - m).powi(2)).sum() / (n - 1) as f64;
        let ab = s.alpha_bar(k);
        let want = ab * var0 + (1.0 - ab);
        let rel = (var - want).abs() / want;
        ensure(rel < 0.05, || format!("k={k}: variance {var} vs {want} ({:.2}%)", 100.0 * rel))?;
        out.push(format!("k={k} {:.2}%", 100.0 * rel));
    }
    Ok(out.join(", "))
}

fn sampling_algebra() -> Outcome {
    let s = make_schedule(1, 1e-4, 0.02).map_err(e2s)?;
    let zero = |x: &Mat, _: &Mat, _: usize| Mat::zeros(x.dim());
    let mut noise = CountingNoise::new(GaussianNoise::new(3));
    let out = sample_with(&s, &zero, &Mat::zeros((2, 4)), (35, 6), &mut noise).map_err(e2s)?;
    ensure(noise.draws == 1, || format!("{} noise draws for K=1, expected only the initial one", noise.draws))?;
    let theta1 = GaussianNoise::new(3).standard_normal_mat(35, 6);
    let want = theta1 / s.alpha(1).sqrt();
    let err = (&out - &want).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
    ensure(err < 1e-10, || format!("max deviation {err:e}"))?;

    let s20 = make_schedule(20, 1e-4, 0.02).map_err(e2s)?;
    let mut noise = CountingNoise::new(GaussianNoise::new(4));
    sample_with(&s20, &zero, &Mat::zeros((2, 4)), (35, 6), &mut noise).map_err(e2s)?;
    ensure(noise.draws == 20, || format!("K=20 drew {} matrices, expected 20", noise.draws))?;
    Ok(format!("max deviation {err:.1e}, no noise at k=1"))
}

trait DrawExt {
    fn standard_normal_mat(self, r: usize, c: usize) -> Mat;
}

impl DrawExt for GaussianNoise {
    fn standard_normal_mat(mut self, r: usize, c: usize) -> Mat {
        gpd_core::diffusion::NoiseSource::standard_normal(&mut self, r, c)
    }
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

fn tiny_denoiser(strategy: Strategy) -> DenoiserConfig {
    DenoiserConfig { layers: 2, heads: 2, model_dim: 8, ff_mult: 2, strategy, timestep_embed_dim: 8, seed: 5 }
}

fn gradient_fidelity() -> Outcome {
    let descriptors = PredictorConfig::default().descriptors();
    let layout = TokenLayout::new(&descriptors).map_err(e2s)?;
    let (l, g) = (layout.len(), layout.width);
    let mut summary = Vec::new();
    for s in Strategy::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut d = Denoiser::new(&tiny_denoiser(s), &layout, 5).map_err(e2s)?;
        // move off the zero-initialised modulation so every path carries gradient
        for i in 0..d.params().len() {
            let (r, c) = d.params().get(i).dim();
            let jitter = randn(&mut rng, r, c) * 0.3;
            *d.params_mut().get_mut(i) += &jitter;
        }
        let x = randn(&mut rng, l, g);
        let p = randn(&mut rng, 2, 5);
        let eps = randn(&mut rng, l, g);
        let (_, grads) = d.loss_and_grads(&x, &p, 37, &eps).map_err(e2s)?;
        let sizes: Vec<usize> = (0..d.params().len()).map(|i| d.params().get(i).len()).collect();
        let total: usize = sizes.iter().sum();
        let mut worst = 0.0f64;
        for _ in 0..60 {
            let mut flat = rng.gen_range(0..total);
            let mut i = 0;
            while flat >= sizes[i] {
                flat -= sizes[i];
                i += 1;
            }
            let orig = d.params().get(i).as_slice().unwrap()[flat];
            let h = 1e-5;
            d.params_mut().get_mut(i).as_slice_mut().unwrap()[flat] = orig + h;
            let up = d.loss(&x, &p, 37, &eps).map_err(e2s)?;
            d.params_mut().get_mut(i).as_slice_mut().unwrap()[flat] = orig - h;
            let down = d.loss(&x, &p, 37, &eps).map_err(e2s)?;
            d.params_mut().get_mut(i).as_slice_mut().unwrap()[flat] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(fd, grads[i].as_slice().unwrap()[flat]));
        }
        ensure(worst < 1e-3, || format!("{s}: max relative error {worst:e}"))?;
        summary.push(format!("{s} {worst:.1e}"));
    }

    let cfg = PredictorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = Predictor::new(&cfg).map_err(e2s)?.flat_params().len();
    let flat: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let model = Predictor::from_flat(&cfg, &flat).map_err(e2s)?;
    let x = randn(&mut rng, 16, cfg.input_width());
    let y = randn(&mut rng, 16, cfg.horizon);
    let (_, grads) = model.loss_and_grads(&x, &y);
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let i = rng.gen_range(0..n);
        let fd = central_difference(
            |v| {
                let mut f = flat.clone();
                f[i] = v;
                Predictor::from_flat(&cfg, &f).unwrap().loss(&x, &y)
            },
            flat[i],
            1e-6,
        );
        worst = worst.max(rel_err(fd, analytic[i]));
    }
    ensure(worst < 1e-3, || format!("predictor: max relative error {worst:e}"))?;
    summary.push(format!("predictor {worst:.1e}"));
    Ok(summary.join(", "))
}

fn conditioning_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut tape = Tape::new();
    let big = tape.input(randn(&mut rng, 40, 9) * 30.0);
    let sm = tape.softmax(big);
    let rows = tape.value(sm).sum_axis(ndarray::Axis(1));
    let worst_row = rows.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst_row <= 1e-6 && tape.value(sm).iter().all(|v| *v >= 0.0), || {
        format!("softmax rows off by {worst_row:e}")
    })?;

    let descriptors = PredictorConfig::default().descriptors();
    let layout = TokenLayout::new(&descriptors).map_err(e2s)?;
    let (l, g) = (layout.len(), layout.width);
    let d = Denoiser::new(&tiny_denoiser(Strategy::PreAdaptive), &layout, 5).map_err(e2s)?;
    let w = d.pre_adaptive_weights(&randn(&mut rng, l, g), &randn(&mut rng, 2, 5)).map_err(e2s)?;
    let worst_adapt = w.sum_axis(ndarray::Axis(1)).iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst_adapt <= 1e-6 && w.iter().all(|v| *v >= 0.0), || format!("prompt attention rows off by {worst_adapt:e}"))?;
    for _ in 0..20 {
        let (alpha, _) = ops::adaptive(&randn(&mut rng, l, 8), &randn(&mut rng, 2, 8), &(randn(&mut rng, 8, 8) * 3.0), &randn(&mut rng, 1, 8));
        let worst = alpha.sum_axis(ndarray::Axis(1)).iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
        ensure(worst <= 1e-6, || format!("adaptive rows off by {worst:e}"))?;
    }

    let tokens = randn(&mut rng, l, 8);
    let temb = randn(&mut rng, 1, 8);
    let mut prompt = randn(&mut rng, 2, 8);
    prompt.row_mut(1).fill(0.0);
    let spatial = vec![LayerKind::Spatial; l];
    ensure(ops::pre_inductive(&tokens, &prompt, &temb, &spatial) == ops::pre(&tokens, &prompt, &temb), || {
        "pre_inductive with spatial kinds and zero temporal prompt differs from pre".into()
    })?;

    let d = Denoiser::new(&tiny_denoiser(Strategy::AdaptiveNorm), &layout, 5).map_err(e2s)?;
    for k in [1, 50, 500] {
        let x = randn(&mut rng, l, g);
        let p = randn(&mut rng, 2, 5);
        ensure(
            d.predict_noise(&x, &p, k).map_err(e2s)? == d.predict_noise_unconditioned(&x, &p, k).map_err(e2s)?,
            || format!("adaptive_norm at init differs from the unconditioned network at k={k}"),
        )?;
    }
    Ok(format!("softmax {worst_row:.1e}, prompt attention {worst_adapt:.1e}, exact degenerations"))
}

fn tucker_auc() -> Outcome {
    let spec = SyntheticCitySpec {
        region_count: 50,
        target_region_count: Some(10),
        pattern_count: 3,
        noise_sigma: 0.05,
        edge_probability: 0.06,
        ..SyntheticCitySpec::default()
    };
    let (cities, _) = generate_synthetic_cities(&spec, 1).map_err(e2s)?;
    let (span, _) = split_few_shot(&cities[0], 3).map_err(e2s)?;
    let city = cities[0].restrict(span).map_err(e2s)?;
    let triples = build_ukg(&city, 2, None, 0.9).map_err(e2s)?;
    let all: BTreeSet<_> = triples.iter().cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for t in &triples {
        if rng.gen_bool(0.1) {
            held.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    let cfg = TuckerConfig { dim: 32, epochs: 100, ..TuckerConfig::default() };
    let (model, _) = train_tucker(&train, city.node_ids(), &cfg).map_err(e2s)?;

    // brute force: phi(h, r, t) = sum_ijk W[i, j, k] e_h[i] e_r[j] e_t[k]
    let (e, r, w, d) = (model.entity_embeddings(), model.relation_embeddings(), model.core(), model.dim());
    let n = e.nrows();
    let mut brute = vec![Array2::<f64>::zeros((n, n)); 3];
    for rel in Relation::ALL {
        let ri = rel.index();
        for h in 0..n {
            for t in 0..n {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        let a = e[[h, i]] * r[[ri, j]];
                        for k in 0..d {
                            s += w[[i, j * d + k]] * a * e[[t, k]];
                        }
                    }
                }
                brute[ri][[h, t]] = s;
            }
        }
        let fast = model.score_all(rel);
        let dev = (&fast - &brute[ri]).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
        let scale = brute[ri].mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b)).max(1.0);
        ensure(dev <= 1e-9 * scale, || format!("{rel:?}: fast scorer deviates by {dev:e}"))?;
    }

    let ids = city.node_ids();
    let idx = |s: &str| model.entity_index(s).unwrap();
    let pos: Vec<f64> = held.iter().map(|t| brute[t.relation.index()][[idx(&t.head), idx(&t.tail)]]).collect();
    let mut neg = Vec::new();
    while neg.len() < 2000 {
        let rel = Relation::ALL[rng.gen_range(0..3)];
        let (h, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let cand = gpd_core::UKGTriple { head: ids[h].clone(), relation: rel, tail: ids[t].clone() };
        if h != t && !all.contains(&cand) {
            neg.push(brute[rel.index()][[idx(&cand.head), idx(&cand.tail)]]);
        }
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
        }
    }
    let auc = wins / (pos.len() * neg.len()) as f64;
    ensure(auc > 0.8, || format!("AUC {auc:.4} over {} held-out positives", pos.len()))?;
    Ok(format!("AUC {auc:.4}, {} triples, {} held out", triples.len(), pos.len()))
}

fn masked_ae_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for p in 1..200 {
        let want = (0.75 * p as f64).ceil() as usize;
        let m = sample_mask(p, 0.75, &mut rng);
        let distinct: BTreeSet<_> = m.iter().collect();
        ensure(m.len() == want && mask_count(p, 0.75) == want && distinct.len() == want, || {
            format!("P={p}: masked {} patches, expected {want}", m.len())
        })?;
    }
    let spec = SyntheticCitySpec { region_count: 60, target_region_count: Some(10), ..SyntheticCitySpec::default() };
    let (cities, _) = generate_synthetic_cities(&spec, 1).map_err(e2s)?;
    let (span, _) = split_few_shot(&cities[0], 3).map_err(e2s)?;
    let city = cities[0].restrict(span).map_err(e2s)?;
    let corpus: Vec<Vec<f64>> = city.series().rows().into_iter().map(|r| r.to_vec()).collect();
    let (_, losses) = train_masked_ae(&corpus, &MaskedAeConfig::default()).map_err(e2s)?;
    let (first, last) = (losses[0], *losses.last().unwrap());
    ensure(last < 0.5 * first, || format!("loss {first:.4} -> {last:.4}"))?;
    Ok(format!("loss {first:.4} -> {last:.4} ({:.1}%)", 100.0 * last / first))
}

fn assumption_one() -> Outcome {
    let spec = SyntheticCitySpec {
        region_count: 40,
        target_region_count: Some(2),
        pattern_count: 2,
        noise_sigma: 0.0,
        ..SyntheticCitySpec::default()
    };
    let (cities, assignment) = generate_synthetic_cities(&spec, 1).map_err(e2s)?;
    let records = prepare_source_checkpoints(&cities[..1], &PredictorConfig::default()).map_err(e2s)?;
    let (intra, inter) = intra_inter(&records, &assignment).map_err(e2s)?;
    ensure(intra > inter, || format!("intra {intra:.4} <= inter {inter:.4}"))?;
    Ok(format!("intra {intra:.4} > inter {inter:.4}"))
}

// ---------------------------------------------------------------------------
// End-to-end runs share one config; the period of 30 steps does not divide
// the 24-step day, so the time-of-day average cannot track the patterns.

fn e2e_config(out: &Path) -> ExperimentConfig {
    let text = r#"
        seed = 0
        few_shot_days = 3

        [data]
        source_count = 1

        [data.synthetic]
        region_count = 100
        target_region_count = 40
        pattern_count = 3
        noise_sigma = 0.02
        edge_probability = 0.05
        period = 30
        total_timesteps = 336
        seed = 7

        [prompt.tucker]
        dim = 32
        epochs = 100

        [prompt.masked_ae]
        enc_dim = 32
        epochs = 300

        [denoiser]
        layers = 2
        heads = 4
        model_dim = 32
        timestep_embed_dim = 32
        strategy = "pre_inductive"

        [diffusion]
        train_steps = 3000
        batch_size = 16
        learning_rate = 1e-3
    "#;
    let mut cfg = ExperimentConfig::from_toml_str(text).expect("valid config");
    cfg.output_dir = out.to_path_buf();
    cfg
}

struct Shared {
    dir: tempfile::TempDir,
    main: Option<RunReport>,
}

fn end_to_end(shared: &mut Shared) -> Outcome {
    let cfg = e2e_config(shared.dir.path());
    ensure(cfg.diffusion.train_steps >= 3000, || "fewer than 3000 diffusion steps".into())?;
    let report = run_pipeline(&cfg).map_err(e2s)?;
    shared.main = Some(report.clone());
    let sim = report.similarity.as_ref().ok_or("no similarity analysis")?;
    let detail = format!(
        "beats HA on {:.1}% of {} regions (MAE {:.4} vs HA {:.4}), own-pattern {:.1}%, diffusion loss {:.3} -> {:.3}",
        100.0 * report.beats_ha_fraction,
        report.regions.len(),
        report.mean.mae,
        report.ha_mean.mae,
        100.0 * sim.own_pattern_fraction,
        report.diffusion_loss_first,
        report.diffusion_loss_last
    );
    ensure(report.regions.len() == 40, || format!("{} target regions evaluated", report.regions.len()))?;
    ensure(report.beats_ha_fraction >= 0.7 && sim.own_pattern_fraction >= 0.8, || detail.clone())?;
    Ok(detail)
}

fn multi_source(shared: &mut Shared) -> Outcome {
    let one = shared.main.clone().ok_or("end-to-end run did not complete")?;
    let cfg = e2e_config(shared.dir.path());
    let two = run_variant(&cfg, &Variant { label: "sources-2".into(), source_count: 2, ..Variant::main(&cfg) })
        .map_err(e2s)?;
    let ratio = two.mean.mae / one.mean.mae;
    let detail = format!("MAE one source {:.4}, two sources {:.4}, ratio {ratio:.4}", one.mean.mae, two.mean.mae);
    ensure(two.source_cities == 2 && ratio <= 1.02, || detail.clone())?;
    Ok(detail)
}

fn determinism(shared: &mut Shared) -> Outcome {
    let first = shared.main.clone().ok_or("end-to-end run did not complete")?;
    let fresh = tempfile::tempdir().map_err(e2s)?;
    let again = run_pipeline(&e2e_config(fresh.path())).map_err(e2s)?;
    let mut a = serde_json::to_value(&first).map_err(e2s)?;
    let mut b = serde_json::to_value(&again).map_err(e2s)?;
    a["wall_clock_secs"] = 0.into();
    b["wall_clock_secs"] = 0.into();
    let differing: Vec<String> = a
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    ensure(first.same_metrics(&again) && differing.is_empty(), || {
        format!("re-run in a fresh directory changed: {}", differing.join(", "))
    })?;
    Ok(format!("identical reports, config {}", &first.config_hash[..12]))
}

// ---------------------------------------------------------------------------

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut shared = Shared { dir, main: None };

    type Plain = fn() -> Outcome;
    type WithShared = fn(&mut Shared) -> Outcome;
    enum Check {
        Plain(Plain),
        Shared(WithShared),
    }
    let checks: Vec<(&str, Duration, Check)> = vec![
        ("tokenizer round trip", Duration::from_secs(10), Check::Plain(tokenizer_round_trip)),
        ("forward-process statistics", Duration::from_secs(30), Check::Plain(forward_statistics)),
        ("sampling algebra", Duration::from_secs(1), Check::Plain(sampling_algebra)),
        ("gradient fidelity", Duration::from_secs(300), Check::Plain(gradient_fidelity)),
        ("conditioning invariants", Duration::from_secs(60), Check::Plain(conditioning_invariants)),
        ("TuckER sanity", Duration::from_secs(120), Check::Plain(tucker_auc)),
        ("masked-AE contract", Duration::from_secs(300), Check::Plain(masked_ae_contract)),
        ("intra-pattern similarity", Duration::from_secs(600), Check::Plain(assumption_one)),
        ("end-to-end few-shot transfer", Duration::from_secs(3 * 3600), Check::Shared(end_to_end)),
        ("multi-source benefit", Duration::from_secs(3 * 3600), Check::Shared(multi_source)),
        ("determinism", Duration::from_secs(3 * 3600), Check::Shared(determinism)),
    ];

    let mut failed = 0;
    for (name, limit, check) in checks {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match &check {
            Check::Plain(f) => f(),
            Check::Shared(f) => f(&mut shared),
        }));
        let took = started.elapsed();
        let outcome = match result {
            Ok(Ok(detail)) if took <= limit => Ok(detail),
            Ok(Ok(detail)) => Err(format!("{detail}; took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
            Ok(Err(e)) => Err(e),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}  [{:.1}s]  {detail}", took.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}  [{:.1}s]  {reason}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
