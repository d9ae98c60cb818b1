mod common;

use std::sync::OnceLock;

use zstyle::attention::StyleMask;
use zstyle::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use zstyle::numerics::{SeededRng, Tensor};
use zstyle::pipeline::{
    deterministic_extractor, diagnostics_csv, gram_matrix, gram_style_distance, image_to_latent, latent_to_image,
    parse_diagnostics_csv, perceptual_losses, reconstruct, stylize, DeterministicExtractor, FeatureExtractor,
    InjectionConfig, SainMode,
};
use zstyle::toy::{make_texture_dataset, TextureKind, ToyConfig, ToyDenoiser};
use zstyle::Error;

fn trained() -> &'static (ToyDenoiser, NoiseSchedule) {
    static MODEL: OnceLock<(ToyDenoiser, NoiseSchedule)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let s = common::schedule();
        (common::trained_toy(&s), s)
    })
}

fn untrained(steps: usize) -> (ToyDenoiser, NoiseSchedule) {
    let cfg = ToyConfig { patch: 4, channels: 3, dim: 16, blocks: 4, mlp_hidden: 16, steps };
    (ToyDenoiser::init(cfg, 12).unwrap(), make_schedule(steps, ScheduleKind::default()).unwrap())
}

fn texture(kind: TextureKind, seed: u64) -> Tensor {
    make_texture_dataset(&[kind], 1, 16, seed).remove(0).image
}

#[test]
fn identical_inputs_reproduce_plain_reconstruction() {
    let (d, s) = trained();
    let img = texture(TextureKind::Dots, 3);
    let cfg = InjectionConfig { lambda: 1.0, step_window: (0, 30), sain: SainMode::Off, ..InjectionConfig::default() };
    let out = stylize(&img, std::slice::from_ref(&img), d, s, &cfg).unwrap();
    let plain = reconstruct(&img, d, s).unwrap();
    assert!(out.image.max_abs_diff(&plain).unwrap() < 1e-6);
    assert!(out.diagnostics.iter().all(|r| r.style_vs_stylized <= 1e-6));
    let all_blocks = InjectionConfig { blocks: vec![0, 1, 2, 3], ..cfg };
    let out = stylize(&img, std::slice::from_ref(&img), d, s, &all_blocks).unwrap();
    assert!(out.image.max_abs_diff(&plain).unwrap() < 1e-6);
}

#[test]
fn empty_window_is_plain_reconstruction_with_sain_off() {
    let (d, s) = untrained(8);
    let c = texture(TextureKind::Stripes, 1);
    let st = texture(TextureKind::GaussianBlobs, 2);
    let cfg = InjectionConfig { step_window: (8, 8), sain: SainMode::Off, ..InjectionConfig::for_steps(8) };
    let out = stylize(&c, std::slice::from_ref(&st), &d, &s, &cfg).unwrap();
    assert_eq!(out.image, reconstruct(&c, &d, &s).unwrap());
}

fn channel_means(x: &Tensor) -> Vec<f64> {
    let c = *x.shape().last().unwrap();
    let n = (x.len() / c) as f64;
    (0..c).map(|j| x.data().iter().skip(j).step_by(c).sum::<f64>() / n).collect()
}

#[test]
fn sain_moves_initial_latent_toward_style() {
    let (d, s) = untrained(10);
    let kinds = [TextureKind::Stripes, TextureKind::Dots, TextureKind::GaussianBlobs];
    let imgs: Vec<Tensor> = make_texture_dataset(&kinds, 6, 16, 8).into_iter().map(|t| t.image).collect();
    for pair in imgs.chunks(2) {
        let cfg = InjectionConfig::for_steps(10);
        let out = stylize(&pair[0], &pair[1..], &d, &s, &cfg).unwrap();
        let w = out.sain_weight.expect("SAIN on by default");
        assert!(w.w > 0.0 && w.w <= 1.0);
        let (mc, ms, mi) = (
            channel_means(&out.content_latent),
            channel_means(&out.style_latent),
            channel_means(&out.initial_latent),
        );
        for j in 0..3 {
            assert!((mi[j] - ms[j]).abs() <= (mc[j] - ms[j]).abs());
            assert!((mi[j] - (mc[j] + w.w * (ms[j] - mc[j]))).abs() < 1e-9);
        }
        let off = stylize(&pair[0], &pair[1..], &d, &s, &InjectionConfig { sain: SainMode::Off, ..cfg }).unwrap();
        assert!(off.sain_weight.is_none());
        assert_eq!(off.initial_latent, off.content_latent);
    }
}

#[test]
fn printed_sign_weight_is_at_least_one() {
    let (d, s) = untrained(6);
    let c = texture(TextureKind::Stripes, 4);
    let st = texture(TextureKind::Dots, 5);
    let cfg = InjectionConfig { sain: SainMode::Printed, ..InjectionConfig::for_steps(6) };
    let w = stylize(&c, std::slice::from_ref(&st), &d, &s, &cfg).unwrap().sain_weight.unwrap();
    assert!(w.w >= 1.0 && (w.w - w.kl.exp()).abs() < 1e-12);
}

#[test]
fn diagnostics_layout_and_csv_round_trip() {
    let (d, s) = untrained(6);
    let c = texture(TextureKind::Stripes, 6);
    let st = texture(TextureKind::Dots, 7);
    let cfg = InjectionConfig { cosine_diagnostics: true, ..InjectionConfig::for_steps(6) };
    let out = stylize(&c, std::slice::from_ref(&st), &d, &s, &cfg).unwrap();
    assert_eq!(out.diagnostics.len(), 6);
    for (k, r) in out.diagnostics.iter().enumerate() {
        assert_eq!((r.step, r.t), (k, 6 - k));
        assert_eq!(r.cosine.is_some(), cfg.in_window(k));
        if let Some(cos) = &r.cosine {
            assert!(cos.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        }
    }
    let text = diagnostics_csv(&out.diagnostics);
    assert!(text.starts_with("t,style_vs_stylized,style_vs_content\n"));
    let rows = parse_diagnostics_csv(&text).unwrap();
    assert_eq!(rows.len(), 6);
    for (row, r) in rows.iter().zip(&out.diagnostics) {
        assert_eq!(*row, (r.t, r.style_vs_stylized, r.style_vs_content));
    }
    // The last row compares the output images themselves.
    let last = out.diagnostics.last().unwrap();
    let flat = |x: &Tensor| x.clone().reshape(vec![x.len() / 3, 3]).unwrap();
    let direct = gram_style_distance(&flat(&reconstruct(&st, &d, &s).unwrap()), &flat(&out.image)).unwrap();
    assert!((last.style_vs_stylized - direct).abs() < 1e-12);
    assert!(parse_diagnostics_csv("bad header\n1,2,3\n").is_err());
}

#[test]
fn stylize_is_deterministic() {
    let (d, s) = untrained(6);
    let c = texture(TextureKind::Stripes, 9);
    let st = texture(TextureKind::GaussianBlobs, 10);
    let cfg = InjectionConfig::for_steps(6);
    let a = stylize(&c, std::slice::from_ref(&st), &d, &s, &cfg).unwrap();
    let b = stylize(&c, std::slice::from_ref(&st), &d, &s, &cfg).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn multi_style_and_mask_runs() {
    let (d, s) = untrained(6);
    let c = texture(TextureKind::Stripes, 11);
    let s1 = texture(TextureKind::Dots, 12);
    let s2 = texture(TextureKind::GaussianBlobs, 13);
    let cfg = InjectionConfig::for_steps(6);
    let one = stylize(&c, std::slice::from_ref(&s1), &d, &s, &cfg).unwrap();
    let two = stylize(&c, &[s1.clone(), s2.clone()], &d, &s, &cfg).unwrap();
    assert!(two.image.is_finite());
    assert_ne!(one.image, two.image);

    // A fully open mask is the unmasked run; an empty one removes the style tokens.
    let tokens = 16;
    let open = InjectionConfig { mask: Some(StyleMask::full(tokens)), ..cfg.clone() };
    assert_eq!(stylize(&c, std::slice::from_ref(&s1), &d, &s, &open).unwrap().image, one.image);
    let closed = InjectionConfig { mask: Some(StyleMask::empty(tokens)), sain: SainMode::Off, ..cfg.clone() };
    let masked = stylize(&c, std::slice::from_ref(&s1), &d, &s, &closed).unwrap();
    assert!(masked.image.max_abs_diff(&reconstruct(&c, &d, &s).unwrap()).unwrap() < 1e-6);

    let both = InjectionConfig { mask: Some(StyleMask::full(tokens)), ..cfg };
    assert!(matches!(stylize(&c, &[s1, s2], &d, &s, &both), Err(Error::Config(_))));
}

#[test]
fn configuration_errors() {
    let (d, s) = untrained(6);
    let c = texture(TextureKind::Stripes, 14);
    let st = texture(TextureKind::Dots, 15);
    let base = InjectionConfig::for_steps(6);
    let bad = [
        InjectionConfig { step_window: (4, 2), ..base.clone() },
        InjectionConfig { step_window: (0, 7), ..base.clone() },
        InjectionConfig { lambda: 0.0, ..base.clone() },
        InjectionConfig { blocks: vec![4], ..base.clone() },
        InjectionConfig { sain_bins: 1, ..base.clone() },
    ];
    for cfg in &bad {
        assert!(matches!(stylize(&c, std::slice::from_ref(&st), &d, &s, cfg), Err(Error::Config(_))), "{cfg:?}");
    }
    assert!(matches!(stylize(&c, &[], &d, &s, &base), Err(Error::Config(_))));
    let small = Tensor::filled(&[8, 8, 3], 0.5);
    assert!(matches!(stylize(&c, &[small], &d, &s, &base), Err(Error::Config(_))));
    let other = make_schedule(5, ScheduleKind::default()).unwrap();
    assert!(matches!(stylize(&c, std::slice::from_ref(&st), &d, &other, &InjectionConfig::for_steps(5)), Err(Error::Config(_))));
}

#[test]
fn latent_mapping_round_trips() {
    let img = texture(TextureKind::GaussianBlobs, 16);
    let lat = image_to_latent(&img);
    assert!(lat.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(latent_to_image(&lat).max_abs_diff(&img).unwrap() < 1e-15);
}

#[test]
fn later_window_start_weakens_style() {
    let (d, s) = trained();
    let corpus = common::gram_corpus();
    let means: Vec<f64> = [30, 25, 15, 5]
        .iter()
        .map(|&start| {
            let cfg = InjectionConfig { step_window: (start, 30), ..InjectionConfig::default() };
            corpus
                .iter()
                .map(|(c, st)| {
                    let out = stylize(c, std::slice::from_ref(st), d, s, &cfg).unwrap();
                    out.diagnostics.last().unwrap().style_vs_stylized
                })
                .sum::<f64>()
                / corpus.len() as f64
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

struct Identity;

impl FeatureExtractor for Identity {
    fn features(&self, img: &Tensor) -> zstyle::Result<Vec<Tensor>> {
        Ok(vec![img.clone()])
    }
}

fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *x.shape().last().unwrap();
    let n = (x.len() / c) as f64;
    let mean: Vec<f64> = (0..c).map(|j| x.data().iter().skip(j).step_by(c).sum::<f64>() / n).collect();
    let var = (0..c)
        .map(|j| x.data().iter().skip(j).step_by(c).map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn perceptual_losses_match_direct_computation() {
    let mut rng = SeededRng::new(50);
    let r = rng.normal_tensor(&[8, 8, 3], 1.0);
    let c = rng.normal_tensor(&[8, 8, 3], 1.0);
    let s = rng.normal_tensor(&[8, 8, 3], 2.0);

    let (lc, ls) = perceptual_losses(&r, &c, &s, &Identity).unwrap();
    let (mr, vr) = moments(&r);
    let (ms, vs) = moments(&s);
    assert!((lc - dist(r.data(), c.data())).abs() < 1e-10);
    assert!((ls - (dist(&mr, &ms) + dist(&vr, &vs))).abs() < 1e-10);

    let ext = deterministic_extractor(3);
    let (lc, ls) = perceptual_losses(&r, &c, &s, &ext).unwrap();
    let (fr, fc, fs) = (ext.features(&r).unwrap(), ext.features(&c).unwrap(), ext.features(&s).unwrap());
    let last = fr.len() - 1;
    assert!((lc - dist(fr[last].data(), fc[last].data())).abs() < 1e-10);
    let mut expected = 0.0;
    for (a, b) in fr.iter().zip(&fs) {
        let ((ma, va), (mb, vb)) = (moments(a), moments(b));
        expected += dist(&ma, &mb) + dist(&va, &vb);
    }
    assert!((ls - expected / fr.len() as f64).abs() < 1e-10);
}

#[test]
fn extractor_is_seeded() {
    let img = SeededRng::new(51).normal_tensor(&[16, 16, 3], 0.5);
    let a = deterministic_extractor(1).features(&img).unwrap();
    assert_eq!(a, deterministic_extractor(1).features(&img).unwrap());
    assert_ne!(a, deterministic_extractor(2).features(&img).unwrap());
    assert_eq!(a.len(), deterministic_extractor(1).stage_count());
    let gray = DeterministicExtractor::new(1, 1);
    assert!(gray.features(&img).is_err());
}

#[test]
fn gram_invariances() {
    let mut rng = SeededRng::new(52);
    let x = rng.normal_tensor(&[20, 4], 1.0);
    let rows: Vec<Vec<f64>> = (0..20).rev().map(|i| x.row(i).to_vec()).collect();
    let permuted = Tensor::from_rows(&rows).unwrap();
    assert!(gram_matrix(&x).unwrap().max_abs_diff(&gram_matrix(&permuted).unwrap()).unwrap() < 1e-14);
    assert!(gram_style_distance(&x, &permuted).unwrap() < 1e-14);
    let doubled = gram_matrix(&x.scale(2.0)).unwrap();
    assert!(doubled.max_abs_diff(&gram_matrix(&x).unwrap().scale(4.0)).unwrap() < 1e-12);
    // Oracle: entry (a, b) is the mean over tokens of x_a x_b, divided by d.
    let g = gram_matrix(&x).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            let e = (0..20).map(|i| x.get(i, a) * x.get(i, b)).sum::<f64>() / 80.0;
            assert!((g.get(a, b) - e).abs() < 1e-14);
        }
    }
    assert!(matches!(gram_style_distance(&x, &Tensor::zeros(&[3, 3])), Err(Error::Dimension(_))));
}
