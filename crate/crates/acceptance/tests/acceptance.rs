//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or exceeds its time budget.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use attnerase_core::attention::{
    logit_shift_softmax, modulated_softmax, row_softmax, AttentionLogits, AttentionMap, Branch, LayerId,
    SuppressionVector,
};
use attnerase_core::backend::{Backend, ToyBackend, ToySpec};
use attnerase_core::orchestrator::{
    curves::parse_jsonl, draw_noise, forward_diffuse, run_removal, run_removal_observed, AttentionEvent, LatentState,
    RemovalConfig, RemovalObserver, StartEvent, StepEvent,
};
use attnerase_core::strategy::StrategyKind;
use attnerase_core::tensor::{Image, PixelMask, Tensor};
use attnerase_core::theory::report::{noise_descriptors, NOISE_RHOS, NOISE_SIGMAS};
use attnerase_core::theory::{
    empirical_presence, exponential_gate, g_theory, gating_consistency, kl_optimal_row, noisy_presence_mc,
    presence_curve_experiment, robust_presence_formula, CurveScenario, CurveTable, MixtureSpec, NoiseSpec,
};
use attnerase_service::http::router;
use attnerase_service::jobs::{JobService, JobStatus, ServiceOptions};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_row_error(m: &AttentionMap) -> f64 {
    m.values()
        .chunks(m.num_keys())
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn random_logits(rng: &mut ChaCha8Rng) -> AttentionLogits {
    let heads = rng.random_range(1..=3);
    let queries = rng.random_range(1..=24);
    let keys = rng.random_range(2..=48);
    let scale = rng.random_range(0.1..12.0);
    let values = (0..heads * queries * keys).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    AttentionLogits::new(values, heads, queries, keys, LayerId::new("rand"), 1).unwrap()
}

fn softmax_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut diff, mut rows) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let logits = random_logits(&mut rng);
        // 1 − U[0,1) lies in (0, 1].
        let eta: Vec<f64> = (0..logits.num_keys()).map(|_| 1.0 - rng.random::<f64>()).collect();
        let eta = SuppressionVector::new(eta).map_err(err)?;
        let a = modulated_softmax(&logits, &eta, Branch::Target).map_err(err)?;
        let b = logit_shift_softmax(&logits, &eta, Branch::Target).map_err(err)?;
        diff = diff.max(max_abs_diff(a.values(), b.values()));
        rows = rows.max(max_row_error(&a)).max(max_row_error(&b));
    }
    ensure(diff <= 1e-9, || format!("max elementwise gap {diff:.3e} > 1e-9"))?;
    ensure(rows <= 1e-6, || format!("row-sum error {rows:.3e} > 1e-6"))?;
    Ok(format!("1000 instances, max gap {diff:.2e}, row-sum error {rows:.2e}"))
}

fn boundary_cases() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gating_violations = 0usize;
    let mut gating_checks = 0usize;
    for case in 0..300 {
        let logits = random_logits(&mut rng);
        let k = logits.num_keys();
        let plain = row_softmax(&logits, Branch::Target);
        let ident = modulated_softmax(&logits, &SuppressionVector::ones(k), Branch::Target).map_err(err)?;
        ensure(plain.bitwise_eq(&ident), || format!("case {case}: eta = 1 differs from softmax"))?;

        let masked: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.4)).take(k - 1).collect();
        let zero = SuppressionVector::masked_constant(&masked, k, 0.0).map_err(err)?;
        let cut = modulated_softmax(&logits, &zero, Branch::Target).map_err(err)?;
        for row in cut.values().chunks(k) {
            ensure(masked.iter().all(|&j| row[j] == 0.0), || format!("case {case}: masked column not zero"))?;
        }
        ensure(max_row_error(&cut) <= 1e-6, || format!("case {case}: rows not normalized"))?;

        // Raising η(j) alone never lowers the weight on j nor raises any other.
        let base: Vec<f64> = (0..k).map(|_| 0.05 + 0.95 * rng.random::<f64>()).collect();
        let j = rng.random_range(0..k);
        let mut prev: Option<AttentionMap> = None;
        for step in 0..=40 {
            let mut eta = base.clone();
            eta[j] = step as f64 / 40.0;
            let m = modulated_softmax(&logits, &SuppressionVector::new(eta).map_err(err)?, Branch::Target)
                .map_err(err)?;
            if let Some(p) = &prev {
                for (row_new, row_old) in m.values().chunks(k).zip(p.values().chunks(k)) {
                    for key in 0..k {
                        gating_checks += 1;
                        let ok = if key == j { row_new[key] >= row_old[key] } else { row_new[key] <= row_old[key] };
                        if !ok {
                            gating_violations += 1;
                        }
                    }
                }
            }
            prev = Some(m);
        }
    }
    let grid: Vec<f64> = (0..10_000).map(|i| i as f64 / 9_999.0).collect();
    let report = gating_consistency(&grid, 1.0).map_err(err)?;
    ensure(gating_violations == 0, || format!("{gating_violations} of {gating_checks} gating checks violated"))?;
    ensure(report.consistent(), || {
        format!(
            "gate ordering violated: exp {} linear {}",
            report.exponential_violations, report.linear_violations
        )
    })?;
    Ok(format!(
        "300 instances bitwise at eta=1, exact zeros at eta=0, {gating_checks} gating checks and {} gate pairs with 0 violations",
        report.pairs_checked
    ))
}

fn mixture_analysis() -> Outcome {
    let n = 10_000;
    let mut min_step = f64::INFINITY;
    let mut max_exact = 0.0f64;
    for ratio in [0.5, 1.0, 2.0] {
        let mut prev = f64::NEG_INFINITY;
        for k in 0..n {
            let spec = MixtureSpec::new(k as f64 / (n - 1) as f64, ratio, 1.0);
            let g = g_theory(&spec).map_err(err)?;
            if k > 0 {
                min_step = min_step.min(g - prev);
            }
            prev = g;
            let e = empirical_presence(&spec, k as u64).map_err(err)?;
            max_exact = max_exact.max((e - g).abs());
        }
    }
    let half = g_theory(&MixtureSpec::new(0.5, 1.0, 1.0)).map_err(err)?;
    let mid = (half - std::f64::consts::FRAC_1_SQRT_2).abs();
    ensure(min_step > 0.0, || format!("not strictly increasing: smallest step {min_step:e}"))?;
    ensure(max_exact <= 1e-9, || format!("empirical vs closed form {max_exact:.3e} > 1e-9"))?;
    ensure(mid <= 1e-9, || format!("midpoint off by {mid:.3e}"))?;
    Ok(format!("smallest step {min_step:.2e}, empirical gap {max_exact:.2e}, midpoint gap {mid:.2e}"))
}

fn noise_robustness() -> Outcome {
    let (src, tgt) = noise_descriptors(8192, 0);
    let mut worst = 0.0f64;
    let mut cells = Vec::new();
    for (i, sigma) in NOISE_SIGMAS.into_iter().enumerate() {
        for (j, rho) in NOISE_RHOS.into_iter().enumerate() {
            let spec = NoiseSpec { sigma, rho, trials: 4000 };
            let mc = noisy_presence_mc(&src, &tgt, &spec, (i * 3 + j + 1) as u64).map_err(err)?;
            let f = robust_presence_formula(&src, &tgt, sigma, rho).map_err(err)?;
            let gap = (mc - f).abs();
            worst = worst.max(gap);
            ensure(gap <= 0.02, || format!("sigma={sigma} rho={rho}: mc {mc:.5} vs formula {f:.5}"))?;
            cells.push(format!("{f:.3}"));
        }
    }
    Ok(format!("D=8192, 4000 trials, worst gap {worst:.2e}, formula grid [{}]", cells.join(" ")))
}

fn kl_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut identity, mut constant, mut equivalence) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..500 {
        let n = 2 + case % 40;
        let a: Vec<f64> = (0..n).map(|_| 8.0 * (rng.random::<f64>() - 0.5)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let beta = 5.0 * rng.random::<f64>();
        let logits = AttentionLogits::new(a, 1, 1, n, LayerId::new("row"), 1).map_err(err)?;
        let sa = row_softmax(&logits, Branch::Target);
        let row = sa.values();
        identity = identity.max(max_abs_diff(&kl_optimal_row(row, &p, 0.0).map_err(err)?, row));
        constant = constant.max(max_abs_diff(&kl_optimal_row(row, &vec![p[0]; n], beta).map_err(err)?, row));
        let gate = exponential_gate(&p, beta).map_err(err)?;
        let shifted = logit_shift_softmax(&logits, &gate, Branch::Target).map_err(err)?;
        equivalence = equivalence.max(max_abs_diff(&kl_optimal_row(row, &p, beta).map_err(err)?, shifted.values()));
    }
    let q = kl_optimal_row(&[0.5, 0.5], &[1.0, 0.0], 4f64.ln()).map_err(err)?;
    let worked = (q[0] - 0.2).abs().max((q[1] - 0.8).abs());
    ensure(identity == 0.0, || format!("beta=0 changed the row by {identity:e}"))?;
    ensure(constant <= 1e-12, || format!("constant presence changed the row by {constant:e}"))?;
    ensure(worked <= 1e-12, || format!("worked example gave {q:?}"))?;
    ensure(equivalence <= 1e-9, || format!("logit-shift gap {equivalence:e}"))?;
    Ok(format!(
        "identity exact, constant {constant:.1e}, worked [{:.12}, {:.12}], equivalence {equivalence:.1e}",
        q[0], q[1]
    ))
}

fn scene(side: usize) -> (Image, PixelMask) {
    let image = Image::from_fn(side, side, |x, y| {
        [(x * 13 % 256) as u8, (y * 7 % 256) as u8, ((x ^ y) * 9 % 256) as u8]
    });
    let mask = PixelMask::from_fn(side, side, |x, y| {
        let (dx, dy) = (x as f64 - 14.5, y as f64 - 17.5);
        dx * dx + dy * dy < 60.0
    });
    (image, mask)
}

fn config(steps: usize, strategy: StrategyKind, seed: u64) -> RemovalConfig {
    RemovalConfig {
        steps,
        strategy,
        seed,
        ..RemovalConfig::default()
    }
}

fn toy() -> ToyBackend {
    ToyBackend::new(ToySpec::default()).unwrap()
}

#[derive(Default)]
struct Trace {
    x0: Option<LatentState>,
    noise: Option<Tensor>,
    initial: Option<LatentState>,
    steps: Vec<StepTrace>,
    attention: Vec<AttnTrace>,
}

struct StepTrace {
    timestep: usize,
    reference: LatentState,
    blend_source: LatentState,
    denoised: LatentState,
    blended: LatentState,
    latent_mask: Vec<bool>,
}

struct AttnTrace {
    layer: String,
    timestep: usize,
    raw: AttentionMap,
    used: AttentionMap,
    eta: Option<Vec<f64>>,
}

impl RemovalObserver for Trace {
    fn on_start(&mut self, e: &StartEvent<'_>) {
        self.x0 = Some(e.source.clone());
        self.noise = Some(e.noise.clone());
        self.initial = Some(e.initial_target.clone());
    }

    fn on_attention(&mut self, e: &AttentionEvent<'_>) {
        self.attention.push(AttnTrace {
            layer: e.layer.id.as_str().to_string(),
            timestep: e.timestep,
            raw: e.target_raw.clone(),
            used: e.target_used.clone(),
            eta: e.eta.map(|v| v.coefficients().to_vec()),
        });
    }

    fn on_step(&mut self, e: &StepEvent<'_>) {
        self.steps.push(StepTrace {
            timestep: e.timestep,
            reference: e.reference.clone(),
            blend_source: e.blend_source.clone(),
            denoised: e.denoised_target.clone(),
            blended: e.blended.clone(),
            latent_mask: e.latent_mask.bits().to_vec(),
        });
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn pipeline() -> Outcome {
    let (image, mask) = scene(32);
    let steps = 12;
    let seed = 21;

    let empty = run_removal(&mut toy(), &image, &PixelMask::empty(32, 32), &config(steps, StrategyKind::TokenWise, seed), "a")
        .map_err(err)?;
    ensure(empty.image == image, || "empty-mask run changed the image".into())?;

    let schedule = toy().descriptor().schedule.for_steps(steps).map_err(err)?;
    let mut checked = 0usize;
    for strategy in StrategyKind::ALL {
        let mut trace = Trace::default();
        run_removal_observed(&mut toy(), &image, &mask, &config(steps, strategy, seed), "a", &mut trace).map_err(err)?;
        let x0 = trace.x0.as_ref().unwrap();
        let eps = trace.noise.as_ref().unwrap();
        ensure(*eps == draw_noise(Image::CHANNELS, 32, 32, seed), || "noise is not the seeded draw".into())?;
        let init = forward_diffuse(x0, steps, eps, &schedule).map_err(err)?;
        ensure(bits_equal(trace.initial.as_ref().unwrap().tensor.as_slice(), init.tensor.as_slice()), || {
            "initial target is not x_T from the shared noise".into()
        })?;
        ensure(trace.steps.len() == steps, || format!("{} steps recorded", trace.steps.len()))?;
        for s in &trace.steps {
            let t = s.timestep;
            let reference = forward_diffuse(x0, t, eps, &schedule).map_err(err)?;
            ensure(bits_equal(s.reference.tensor.as_slice(), reference.tensor.as_slice()), || {
                format!("{strategy} t={t}: reference is not forward_diffuse(x0, t, eps)")
            })?;
            let source_path = if t == 1 { x0.clone() } else { forward_diffuse(x0, t - 1, eps, &schedule).map_err(err)? };
            ensure(bits_equal(s.blend_source.tensor.as_slice(), source_path.tensor.as_slice()), || {
                format!("{strategy} t={t}: blend source is not the shared-noise source path")
            })?;
            let plane = s.latent_mask.len();
            for (k, ((b, src), d)) in s
                .blended
                .tensor
                .as_slice()
                .iter()
                .zip(source_path.tensor.as_slice())
                .zip(s.denoised.tensor.as_slice())
                .enumerate()
            {
                let want = if s.latent_mask[k % plane] { d } else { src };
                ensure(b.to_bits() == want.to_bits(), || format!("{strategy} t={t}: element {k} not blended exactly"))?;
                if !s.latent_mask[k % plane] {
                    checked += 1;
                }
            }
        }
    }

    let c = config(steps, StrategyKind::TokenWise, seed);
    let a = run_removal(&mut toy(), &image, &mask, &c, "d").map_err(err)?;
    let b = run_removal(&mut toy(), &image, &mask, &c, "d").map_err(err)?;
    ensure(a.image == b.image && bits_equal(a.latent.as_slice(), b.latent.as_slice()) && a.curves == b.curves, || {
        "fixed-seed runs differ".into()
    })?;
    Ok(format!(
        "empty mask exact, {checked} background values exact over 5 strategies, seeded runs bit-identical, shared noise verified"
    ))
}

fn strategy_limits() -> Outcome {
    let (image, mask) = scene(32);
    let steps = 8;
    let layers = toy().descriptor().layers.len();

    let mut none = Trace::default();
    run_removal_observed(&mut toy(), &image, &mask, &config(steps, StrategyKind::None, 3), "s", &mut none).map_err(err)?;
    ensure(none.attention.len() == steps * layers, || format!("{} hooked maps", none.attention.len()))?;
    for a in &none.attention {
        ensure(a.raw.bitwise_eq(&a.used), || format!("none modified {} at t={}", a.layer, a.timestep))?;
    }

    let mut full = Trace::default();
    run_removal_observed(&mut toy(), &image, &mask, &config(steps, StrategyKind::Full, 3), "s", &mut full).map_err(err)?;
    let desc = toy().descriptor().clone();
    let mut zeroed = 0usize;
    for a in &full.attention {
        let info = desc.layers.iter().find(|l| l.id.as_str() == a.layer).unwrap();
        let tokens = attnerase_core::orchestrator::rasterize_mask(&mask, info.grid).map_err(err)?.indices();
        ensure(!tokens.is_empty(), || format!("mask missed {}", a.layer))?;
        let eta = a.eta.as_ref().ok_or("full recorded no eta")?;
        ensure((0..eta.len()).all(|j| (eta[j] == 0.0) == tokens.contains(&j)), || "eta zeros do not match the mask".into())?;
        let k = a.used.num_keys();
        for row in a.used.values().chunks(k) {
            for &j in &tokens {
                ensure(row[j] == 0.0, || format!("{} t={}: column {j} = {}", a.layer, a.timestep, row[j]))?;
                zeroed += 1;
            }
        }
    }
    ensure(full.attention.len() == steps * layers, || "full did not hook every layer".into())?;

    let single = PixelMask::from_fn(32, 32, |x, y| x == 21 && y == 9);
    let mut token = Trace::default();
    let mut region = Trace::default();
    run_removal_observed(&mut toy(), &image, &single, &config(steps, StrategyKind::TokenWise, 3), "t", &mut token).map_err(err)?;
    run_removal_observed(&mut toy(), &image, &single, &config(steps, StrategyKind::RegionBased, 3), "t", &mut region).map_err(err)?;
    ensure(token.attention.len() == region.attention.len(), || "trace lengths differ".into())?;
    for (a, b) in token.attention.iter().zip(&region.attention) {
        let (ea, eb) = (a.eta.as_ref().ok_or("no eta")?, b.eta.as_ref().ok_or("no eta")?);
        ensure(bits_equal(ea, eb), || format!("{} t={}: token and region eta differ", a.layer, a.timestep))?;
    }
    Ok(format!(
        "none bitwise over {} maps, full zeroed {zeroed} masked entries, single-token eta identical over {} maps",
        none.attention.len(),
        token.attention.len()
    ))
}

fn presence_curves() -> Outcome {
    let spec = ToySpec::default();
    let pull = presence_curve_experiment(&spec, CurveScenario::Orthogonal, 50).map_err(err)?;
    let control = presence_curve_experiment(&spec, CurveScenario::Control, 50).map_err(err)?;
    let mean = pull.overall_mean();
    let rise = CurveTable::first_half_rise(&mean);
    ensure(rise <= 0.0, || format!("layer-averaged region mean rises by {rise:e} in the first half"))?;
    for l in &pull.layers {
        let r = CurveTable::first_half_rise(&l.region_mean);
        ensure(r <= 0.0, || format!("{} region mean rises by {r:e} in the first half", l.layer.as_str()))?;
    }
    let dev = control.max_deviation_from_one();
    ensure(dev <= 0.02, || format!("control deviates from 1 by {dev:.4}"))?;
    ensure(pull.layers.len() >= 2 && pull.layers_distinct(), || {
        format!("layer curves not distinct (separation {:.2e})", pull.min_layer_separation())
    })?;
    let ends: Vec<String> = pull
        .layers
        .iter()
        .map(|l| format!("{} {:.3}", l.layer.as_str(), l.region_mean[l.region_mean.len() / 2]))
        .collect();
    Ok(format!(
        "mean {:.3} -> {:.3}, control max |1-p| {dev:.4}, layer separation {:.3}, midpoints [{}]",
        mean[0],
        mean[mean.len() - 1],
        pull.min_layer_separation(),
        ends.join(", ")
    ))
}

const BOUNDARY: &str = "acceptance-boundary";

fn multipart(parts: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in parts {
        body.extend_from_slice(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}\"\r\n\r\n")
                .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn call(app: &axum::Router, req: Request<Body>) -> Result<(StatusCode, Vec<u8>), String> {
    let resp = app.clone().oneshot(req).await.map_err(err)?;
    let status = resp.status();
    let body = resp.into_body().collect().await.map_err(err)?.to_bytes().to_vec();
    Ok((status, body))
}

async fn submit(app: &axum::Router, image: &[u8], mask: &[u8], config: &[u8]) -> Result<String, String> {
    let req = Request::post("/v1/jobs")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(&[("image", image), ("mask", mask), ("config", config)])))
        .map_err(err)?;
    let (code, body) = call(app, req).await?;
    ensure(code == StatusCode::ACCEPTED, || format!("submit returned {code}: {}", String::from_utf8_lossy(&body)))?;
    let v: serde_json::Value = serde_json::from_slice(&body).map_err(err)?;
    v["job_id"].as_str().map(str::to_string).ok_or_else(|| "no job_id".into())
}

async fn wait_done(svc: &Arc<JobService>, id: &str) -> Result<(), String> {
    let (s, id) = (Arc::clone(svc), id.to_string());
    let rec = tokio::task::spawn_blocking(move || s.wait(&id, Duration::from_secs(30)))
        .await
        .map_err(err)?
        .map_err(err)?
        .ok_or("job vanished")?;
    ensure(rec.status == JobStatus::Done, || format!("job ended {:?}: {:?}", rec.status, rec.error))
}

async fn fetch(app: &axum::Router, uri: String) -> Result<Vec<u8>, String> {
    let (code, body) = call(app, Request::get(&uri).body(Body::empty()).map_err(err)?).await?;
    ensure(code == StatusCode::OK, || format!("GET {uri} returned {code}"))?;
    Ok(body)
}

async fn service_flow() -> Outcome {
    let (image, mask) = scene(32);
    let image_png = attnerase_service::io::encode_png(&image).map_err(err)?;
    let mask_png = attnerase_service::io::encode_mask_png(&mask).map_err(err)?;
    let cfg = br#"{"steps": 10, "seed": 4, "strategy": "token"}"#;
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("data");

    let svc = Arc::new(JobService::start(&data, ServiceOptions::default()).map_err(err)?);
    let app = router(Arc::clone(&svc));
    let id = submit(&app, &image_png, &mask_png, cfg).await?;
    wait_done(&svc, &id).await?;
    let (code, _) = call(&app, Request::get(format!("/v1/jobs/{id}")).body(Body::empty()).map_err(err)?).await?;
    ensure(code == StatusCode::OK, || format!("status returned {code}"))?;
    let http_png = fetch(&app, format!("/v1/jobs/{id}/result")).await?;
    let http_curves = fetch(&app, format!("/v1/jobs/{id}/curves")).await?;
    svc.shutdown();
    drop(app);
    drop(svc);

    // Jobs queued with no workers must run after a restart.
    let queued = {
        let idle = Arc::new(JobService::start(&data, ServiceOptions { workers: 0 }).map_err(err)?);
        let app = router(Arc::clone(&idle));
        let ids = vec![submit(&app, &image_png, &mask_png, cfg).await?, submit(&app, &image_png, &mask_png, cfg).await?];
        idle.shutdown();
        ids
    };
    let svc = Arc::new(JobService::start(&data, ServiceOptions::default()).map_err(err)?);
    let app = router(Arc::clone(&svc));
    for q in &queued {
        wait_done(&svc, q).await?;
        let png = fetch(&app, format!("/v1/jobs/{q}/result")).await?;
        ensure(png == http_png, || "re-queued job produced different bytes".into())?;
    }
    svc.shutdown();

    let img_path = dir.path().join("in.png");
    let mask_path = dir.path().join("mask.png");
    let cfg_path = dir.path().join("config.json");
    let out_path = dir.path().join("out.png");
    let curves_path = dir.path().join("curves.jsonl");
    std::fs::write(&img_path, &image_png).map_err(err)?;
    std::fs::write(&mask_path, &mask_png).map_err(err)?;
    std::fs::write(&cfg_path, cfg).map_err(err)?;
    let args: Vec<std::ffi::OsString> = vec![
        "attnerase".into(),
        "erase".into(),
        "--image".into(),
        img_path.into(),
        "--mask".into(),
        mask_path.into(),
        "--out".into(),
        out_path.clone().into(),
        "--curves".into(),
        curves_path.clone().into(),
        "--config".into(),
        cfg_path.into(),
    ];
    let code = tokio::task::spawn_blocking(move || attnerase_service::cli::run_from(args)).await.map_err(err)?;
    ensure(code == 0, || format!("CLI exited {code}"))?;
    let cli_png = std::fs::read(&out_path).map_err(err)?;
    ensure(cli_png == http_png, || "CLI and HTTP results differ".into())?;

    let presence = |text: &[u8]| -> Result<Vec<(usize, String, String, u64)>, String> {
        let recs = parse_jsonl(std::str::from_utf8(text).map_err(err)?).map_err(err)?;
        Ok(recs
            .into_iter()
            .map(|r| (r.timestep, r.layer_id.as_str().to_string(), format!("{:?}", r.token_index), r.presence.to_bits()))
            .collect())
    };
    let cli_curves = std::fs::read(&curves_path).map_err(err)?;
    let (a, b) = (presence(&cli_curves)?, presence(&http_curves)?);
    ensure(!a.is_empty() && a == b, || "CLI and HTTP curves differ".into())?;
    Ok(format!(
        "job {id} done, {} re-queued jobs recovered, CLI == HTTP ({} PNG bytes, {} curve records)",
        queued.len(),
        cli_png.len(),
        a.len()
    ))
}

fn service_lifecycle() -> Outcome {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(err)?
        .block_on(service_flow())
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "softmax_algebra", limit: Duration::from_secs(5), run: softmax_algebra },
        Criterion { name: "suppression_boundaries", limit: Duration::from_secs(5), run: boundary_cases },
        Criterion { name: "mixture_presence", limit: Duration::from_secs(10), run: mixture_analysis },
        Criterion { name: "noise_robustness", limit: Duration::from_secs(60), run: noise_robustness },
        Criterion { name: "kl_optimal_gate", limit: Duration::from_secs(5), run: kl_gate },
        Criterion { name: "removal_pipeline", limit: Duration::from_secs(30), run: pipeline },
        Criterion { name: "strategy_limits", limit: Duration::from_secs(30), run: strategy_limits },
        Criterion { name: "presence_curves", limit: Duration::from_secs(60), run: presence_curves },
        Criterion { name: "service_lifecycle", limit: Duration::from_secs(60), run: service_lifecycle },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("over time budget; {d}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:<24} {:>8.2}s / {:>3}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
