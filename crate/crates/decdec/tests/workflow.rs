//! End-to-end exercises of the public API: quantize, persist, reload,
//! select, compensate — plus sanity checks on the bundled data files.

use std::path::PathBuf;

use decdec::compensation::{dec_gemv, decdec_forward, gemv};
use decdec::hwmodel::{HardwareProfile, ModelShapes};
use decdec::quantizer::{base_quantize, residual_quantize, QuantizedResidual, WeightSet};
use decdec::selection::{approx_topk, derive_boundaries};
use decdec::synth::{gen_trace, gen_weights, SynthTraceConfig};
use decdec::Matrix;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

#[test]
fn bundled_profiles_parse_and_validate() {
    let dir = data_dir().join("profiles");
    let mut names = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let p = HardwareProfile::load(&path).unwrap();
        assert!(p.r_bw() > 1.0);
        names.push(p.name);
    }
    names.sort();
    assert_eq!(
        names,
        vec!["rtx4050m", "rtx4070m", "rtx4070s", "rtx4080s", "rtx4090"]
    );
}

#[test]
fn bundled_model_shapes_parse() {
    let m = ModelShapes::load(&data_dir().join("models/llama3_8b_3bit.csv")).unwrap();
    assert_eq!(m.num_blocks, 32);
    let labels: Vec<&str> = m.layers.iter().map(|l| l.label.as_str()).collect();
    assert_eq!(labels, vec!["qkv", "o", "gu", "d"]);
    let d = m.layers.iter().find(|l| l.label == "d").unwrap();
    assert_eq!((d.d_in, d.d_out), (14336, 4096));
}

#[test]
fn save_load_roundtrip_preserves_forward_result() {
    let dir = tempfile::tempdir().unwrap();
    let w = gen_weights(2048, 128, 1);
    let ws = base_quantize(&w, 3, 128).unwrap();
    let qr = residual_quantize(&ws.residual, 4).unwrap();

    let w_path = dir.path().join("w.ddmx");
    let what_path = dir.path().join("what.ddmx");
    let qr_path = dir.path().join("r.ddqr");
    ws.w.save(&w_path).unwrap();
    ws.w_hat.save(&what_path).unwrap();
    qr.save(&qr_path).unwrap();

    let ws2 = WeightSet::import(&w_path, &what_path).unwrap();
    let qr2 = QuantizedResidual::load(&qr_path).unwrap();
    assert_eq!(ws.w.data(), ws2.w.data());
    assert_eq!(ws.residual.data(), ws2.residual.data());

    let cfg = SynthTraceConfig {
        steps: 4,
        d_in: 2048,
        ..Default::default()
    };
    let trace = gen_trace(&cfg, 2).unwrap();
    let b = derive_boundaries(&trace, 64).unwrap();
    let x = trace.step(0);
    let a = decdec_forward(&ws, &qr, x, 32, &b, 9).unwrap();
    let b2 = decdec_forward(&ws2, &qr2, x, 32, &b, 9).unwrap();
    assert_eq!(a.o, b2.o);

    // the forward pass equals its manual composition
    let sel = approx_topk(x, 32, &b, 9).unwrap();
    let manual = gemv(&ws.w_hat, x)
        .unwrap()
        .add(&dec_gemv(&qr, &sel).unwrap())
        .unwrap();
    assert_eq!(a.o, manual.o);
}

#[test]
fn compensation_reduces_error_on_real_pipeline() {
    let w = gen_weights(2048, 128, 5);
    let ws = base_quantize(&w, 3, 128).unwrap();
    let qr = residual_quantize(&ws.residual, 4).unwrap();
    let cfg = SynthTraceConfig {
        steps: 8,
        d_in: 2048,
        ..Default::default()
    };
    let trace = gen_trace(&cfg, 6).unwrap();
    let b = derive_boundaries(&trace, 64).unwrap();
    let mut better = 0;
    for s in 0..trace.num_steps() {
        let x = trace.step(s);
        let full = gemv(&ws.w, x).unwrap();
        let base = gemv(&ws.w_hat, x).unwrap();
        let comp = decdec_forward(&ws, &qr, x, 32, &b, s as u64).unwrap();
        let err_base: f64 = base
            .o
            .iter()
            .zip(&full.o)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        let err_comp: f64 = comp
            .o
            .iter()
            .zip(&full.o)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        if err_comp < err_base {
            better += 1;
        }
    }
    assert_eq!(better, trace.num_steps());
}
