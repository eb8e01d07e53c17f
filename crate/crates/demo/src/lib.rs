//! WebAssembly bindings for `www/index.html`. Every export returns a JSON
//! string so the page needs no generated type glue.

use serde_json::json;
use wasm_bindgen::prelude::*;

use icl_lab::assocmem::{self, AssocConfig, AssocEmbed, OdeMetric};
use icl_lab::datagen::{domain, stream_rng, RecallSampler, TaskSpec};

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// The two-output memory (`n = 2`) under gradient descent next to both
/// gradient-flow ODEs, sampled at `points` log-spaced times.
#[wasm_bindgen]
pub fn ode_trajectory(alpha: f64, lr: f64, steps: u32, points: u32) -> Result<String, JsValue> {
    ode_json(alpha, lr, steps, points).map_err(err)
}

fn ode_json(alpha: f64, lr: f64, steps: u32, points: u32) -> Result<String, String> {
    if !(0.0..1.0).contains(&alpha) || lr <= 0.0 || steps == 0 || points < 2 {
        return Err("need 0 ≤ α < 1, lr > 0, steps ≥ 1, points ≥ 2".into());
    }
    let grid = log_steps(steps as u64, points as usize);
    let cfg = AssocConfig {
        n: 2,
        d: 3,
        alpha,
        lr,
        steps: steps as u64,
        mode: AssocEmbed::Ortho,
        seed: 0,
        batch: None,
        grad_tol: None,
    };
    let (_, rows) = assocmem::run_trajectory(&cfg, &grid).map_err(|e| e.to_string())?;
    let times: Vec<f64> = rows.iter().map(|r| lr * r.step as f64).collect();
    let frob = assocmem::ode_integrate_at(alpha, OdeMetric::Frobenius, &times, 0.05)
        .map_err(|e| e.to_string())?;
    let coef = assocmem::ode_integrate_at(alpha, OdeMetric::Coefficient, &times, 0.05)
        .map_err(|e| e.to_string())?;
    let gd: Vec<_> = rows
        .iter()
        .map(|r| {
            let c = r.coeffs.expect("n = 2 has coefficients");
            json!({ "step": r.step, "a": c.a, "b": c.b, "p_noise": r.p_noise })
        })
        .collect();
    let path = |pts: &[assocmem::OdePoint]| {
        pts.iter()
            .map(|p| json!({ "t": p.t, "a": p.a, "b": p.b }))
            .collect::<Vec<_>>()
    };
    Ok(json!({
        "alpha": alpha,
        "lr": lr,
        "gd": gd,
        "ode_frobenius": path(&frob),
        "ode_coefficient": path(&coef),
        "b_limit": (alpha / (1.0 - alpha)).ln(),
    })
    .to_string())
}

/// Pure-label loss of every rank truncation along one random-embedding run.
#[wasm_bindgen]
pub fn rank_sweep(
    n: u32,
    d: u32,
    alpha: f64,
    lr: f64,
    steps: u32,
    seed: u32,
) -> Result<String, JsValue> {
    rank_json(n as usize, d as usize, alpha, lr, steps as u64, seed as u64).map_err(err)
}

fn rank_json(
    n: usize,
    d: usize,
    alpha: f64,
    lr: f64,
    steps: u64,
    seed: u64,
) -> Result<String, String> {
    if !(2..=16).contains(&n) || d == 0 || d > 64 || steps == 0 || steps > 2_000_000 {
        return Err("need 2 ≤ n ≤ 16, 1 ≤ d ≤ 64, 1 ≤ steps ≤ 2e6".into());
    }
    let cfg = AssocConfig {
        n,
        d,
        alpha,
        lr,
        steps,
        mode: AssocEmbed::Random,
        seed,
        batch: None,
        grad_tol: None,
    };
    let (_, rows) =
        assocmem::run_trajectory(&cfg, &log_steps(steps, 40)).map_err(|e| e.to_string())?;
    let out: Vec<_> = rows
        .iter()
        .map(|r| json!({ "step": r.step, "loss_pure": r.loss_pure, "p_noise": r.p_noise }))
        .collect();
    Ok(json!({ "n": n, "d": d, "alpha": alpha, "rows": out }).to_string())
}

/// One noisy recall sequence with its trigger positions marked.
#[wasm_bindgen]
pub fn recall_sample(
    n: u32,
    t: u32,
    alpha: f64,
    triggers: &str,
    seed: u32,
) -> Result<String, JsValue> {
    sample_json(n as usize, t as usize, alpha, triggers, seed as u64).map_err(err)
}

fn sample_json(
    n: usize,
    t: usize,
    alpha: f64,
    triggers: &str,
    seed: u64,
) -> Result<String, String> {
    let q: Vec<usize> = triggers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| format!("trigger {s:?}: {e}"))
        })
        .collect::<Result<_, _>>()?;
    if t > 4096 {
        return Err("T ≤ 4096".into());
    }
    let spec = TaskSpec::uniform(n, q, alpha, t).map_err(|e| e.to_string())?;
    let s = RecallSampler::new(&spec)
        .map_err(|e| e.to_string())?
        .recall(&mut stream_rng(seed, domain::TRAIN, 0));
    let after_trigger: Vec<bool> = (0..s.z.len())
        .map(|i| i > 0 && spec.is_trigger(s.z[i - 1]))
        .collect();
    Ok(json!({
        "z": s.z,
        "y": s.y,
        "ybar": s.ybar,
        "tau": spec.tau(),
        "triggers": spec.triggers,
        "after_trigger": after_trigger,
    })
    .to_string())
}

/// `points` distinct steps spread evenly in log scale over `1..=steps`, plus 0.
fn log_steps(steps: u64, points: usize) -> Vec<u64> {
    let mut v = vec![0];
    let top = (steps as f64).ln();
    for i in 0..points {
        let s = (top * i as f64 / (points - 1).max(1) as f64).exp().round() as u64;
        v.push(s.clamp(1, steps));
    }
    v.dedup();
    v
}
