mod common;

use ndarray::{Array3, ArrayD, Axis, Ix3, IxDyn};
use nervlab::budget::{count_params, estimate_flops, plan_widths, solve_fc_dim, solve_width, FC_DIM_RANGE};
use nervlab::components::{pixel_shuffle, presets, StemSpec};
use nervlab::metrics::{ms_ssim_frame, MS_SSIM_MIN_SIDE};
use nervlab::xinc::conv_contributions;

use common::{reference_ms_ssim, rng, uniform, xinc_conv_error, xinc_shuffle_error, XINC_MODELS, XINC_TOL};

fn frame(data: &ArrayD<f64>) -> Array3<f64> {
    data.clone().into_dimensionality::<Ix3>().unwrap()
}

#[test]
fn ms_ssim_matches_direct_filtering() {
    let mut r = rng(3);
    let side = MS_SSIM_MIN_SIDE;
    for noise in [0.02, 0.1, 0.4] {
        let a = frame(&uniform(&mut r, &[side, side, 3], 0.0, 1.0));
        let n = frame(&uniform(&mut r, &[side, side, 3], -noise, noise));
        let b = (&a + &n).mapv(|v| v.clamp(0.0, 1.0));
        let got = ms_ssim_frame(&a, &b).unwrap();
        let want = reference_ms_ssim(&a, &b);
        assert!((got - want).abs() < 1e-9, "noise {noise}: {got} vs {want}");
    }
    let a = frame(&uniform(&mut r, &[side, side + 20, 3], 0.0, 1.0));
    assert!((ms_ssim_frame(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ms_ssim_of_inverted_pattern_is_low() {
    let side = MS_SSIM_MIN_SIDE + 16;
    let a = Array3::from_shape_fn((side, side, 3), |(y, x, _)| if (y / 4 + x / 4) % 2 == 0 { 1.0 } else { 0.0 });
    let b = a.mapv(|v| 1.0 - v);
    let got = ms_ssim_frame(&a, &b).unwrap();
    assert!(got < 0.2, "{got}");
    assert!((got - reference_ms_ssim(&a, &b)).abs() < 1e-9);
}

#[test]
fn pixel_shuffle_matches_index_arithmetic() {
    let mut r = rng(4);
    for (h, w, c, sh, sw) in [(2, 3, 1, 2, 3), (3, 2, 2, 2, 2), (1, 4, 3, 3, 1), (2, 2, 1, 1, 1)] {
        let x = uniform(&mut r, &[1, h, w, c * sh * sw], -1.0, 1.0);
        let y = pixel_shuffle(&x, sh, sw).unwrap();
        assert_eq!(y.shape(), &[1, h * sh, w * sw, c]);
        for oy in 0..h * sh {
            for ox in 0..w * sw {
                for ch in 0..c {
                    let (sy, i, sx, j) = (oy / sh, oy % sh, ox / sw, ox % sw);
                    assert_eq!(y[[0, oy, ox, ch]], x[[0, sy, sx, ch * sh * sw + i * sw + j]]);
                }
            }
        }
    }
    let x = ArrayD::from_shape_vec(IxDyn(&[1, 2, 3, 6]), (0..36).map(f64::from).collect()).unwrap();
    assert_eq!(pixel_shuffle(&x, 2, 3).unwrap().shape(), &[1, 4, 9, 1]);
}

#[test]
fn width_plans_follow_the_rounding_rule() {
    assert_eq!(plan_widths(12, 4.0, 2.0, 4), vec![48, 24, 12, 6]);
    assert_eq!(plan_widths(12, 4.0, 1.2, 5), vec![48, 40, 33, 28, 23]);
    let mut expected = vec![(12.0f64 * 4.0).round() as usize];
    for _ in 1..8 {
        let prev = *expected.last().unwrap() as f64;
        expected.push(((prev / 1.4).round() as usize).max(4));
    }
    assert_eq!(plan_widths(12, 4.0, 1.4, 8), expected);
}

fn brute_force_fc_dim(target: usize, template: &nervlab::components::ModelConfig) -> (usize, usize) {
    (FC_DIM_RANGE.0..=FC_DIM_RANGE.1)
        .map(|d| (d, count_params(&template.with_fc_dim(d))))
        .min_by_key(|&(d, c)| (c.abs_diff(target), d))
        .unwrap()
}

#[test]
fn fc_dim_search_agrees_with_sweep() {
    for template in [presets::nerv_1080p(), presets::ffnerv_1080p(), presets::rnerv_desk([64, 128], 8)] {
        for target in [20_000, 150_000, 1_500_000, 3_000_000] {
            assert_eq!(solve_fc_dim(target, &template), brute_force_fc_dim(target, &template), "{} @ {target}", template.name);
        }
    }
}

#[test]
fn doubling_the_target_scales_fc_dim_by_root_two() {
    let mut template = presets::nerv_1080p();
    if let StemSpec::Mlp { hidden_dims, .. } = &mut template.stem {
        *hidden_dims = vec![1];
    }
    let (a, _) = solve_fc_dim(10_000_000, &template);
    let (b, _) = solve_fc_dim(20_000_000, &template);
    let ratio = b as f64 / a as f64;
    assert!((ratio - 2f64.sqrt()).abs() < 0.05, "{a} -> {b}: {ratio}");
}

#[test]
fn slower_width_decay_costs_more_flops_at_equal_size() {
    let target = 1_500_000;
    let mut slow = presets::nerv_1080p();
    slow.r = 1.2;
    let fast = solve_width(target, &presets::nerv_1080p(), 0.01).unwrap();
    let slow = solve_width(target, &slow, 0.01).unwrap();
    assert!(estimate_flops(&slow) > estimate_flops(&fast), "{} vs {}", estimate_flops(&slow), estimate_flops(&fast));
}

#[test]
fn conv_head_maps_rebuild_the_head_output() {
    for m in 0..XINC_MODELS {
        let err = xinc_conv_error(m);
        assert!(err <= XINC_TOL, "model {m}: {err:e}");
    }
}

#[test]
fn shuffle_head_maps_rebuild_the_head_output() {
    for m in 0..XINC_MODELS {
        let err = xinc_shuffle_error(m).unwrap_or_else(|e| panic!("model {m}: {e}"));
        assert!(err <= XINC_TOL, "model {m}: {err:e}");
    }
}

#[test]
fn single_identity_kernel_copies_its_input() {
    let mut r = rng(9);
    let input = frame(&uniform(&mut r, &[5, 4, 1], -1.0, 1.0));
    let weight = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0);
    let maps = conv_contributions(input.view(), &weight, &[0.25], 0.0, [1, 1]).unwrap();
    assert_eq!(maps.maps.index_axis(Axis(0), 0), input.index_axis(Axis(2), 0));
    assert_eq!(maps.channel_sum(), input.mapv(|v| v + 0.25));
}
