use std::time::Instant;

use frnet::flow::{flow_energy, tvl1_flow, tvl1_flow_traced, FlowField, GrayFrame, TvL1Params};

const SIZE: usize = 64;

/// Smooth texture sampled at continuous coordinates so shifted copies are exact.
fn texture(x: f64, y: f64) -> f64 {
    let waves = [
        (0.21, 0.05, 0.0, 0.16),
        (-0.07, 0.33, 1.3, 0.12),
        (0.41, -0.29, 2.1, 0.08),
        (0.13, 0.47, 0.4, 0.07),
        (0.57, 0.19, 4.0, 0.05),
    ];
    0.5 + waves
        .iter()
        .map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin())
        .sum::<f64>()
}

/// Frame whose content is `texture` moved by `(dx, dy)`.
fn shifted(dx: f64, dy: f64) -> GrayFrame {
    let px = (0..SIZE * SIZE)
        .map(|i| texture((i % SIZE) as f64 - dx, (i / SIZE) as f64 - dy) as f32)
        .collect();
    GrayFrame::new(SIZE, SIZE, px).unwrap()
}

fn median(mut xs: Vec<f32>) -> f32 {
    xs.sort_by(f32::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn endpoint_error(f: &FlowField, du: f32, dv: f32) -> f32 {
    let total: f32 = f
        .u()
        .iter()
        .zip(f.v())
        .map(|(u, v)| ((u - du).powi(2) + (v - dv).powi(2)).sqrt())
        .sum();
    total / f.u().len() as f32
}

#[test]
fn zero_motion() {
    let a = shifted(0.0, 0.0);
    let f = tvl1_flow(&a, &a, &TvL1Params::default()).unwrap();
    assert!(median(f.u().iter().map(|x| x.abs()).collect()) < 0.05);
    assert!(median(f.v().iter().map(|x| x.abs()).collect()) < 0.05);
}

#[test]
fn unit_horizontal_translation() {
    let f = tvl1_flow(&shifted(0.0, 0.0), &shifted(1.0, 0.0), &TvL1Params::default()).unwrap();
    let (mu, mv) = (median(f.u().to_vec()), median(f.v().to_vec()));
    assert!((mu - 1.0).abs() < 0.2 && mv.abs() < 0.2, "median flow ({mu}, {mv})");
}

#[test]
fn subpixel_diagonal_translation() {
    let f = tvl1_flow(&shifted(0.0, 0.0), &shifted(0.5, -1.5), &TvL1Params::default()).unwrap();
    let epe = endpoint_error(&f, 0.5, -1.5);
    assert!(epe < 0.3, "mean endpoint error {epe}");
}

#[test]
fn translations_in_range_are_recovered_quickly() {
    let params = TvL1Params::default();
    for (dx, dy) in [(0.5, 0.0), (0.0, 2.0), (-1.25, 0.75), (1.5, -1.5), (-2.0, 0.0)] {
        let (a, b) = (shifted(0.0, 0.0), shifted(dx, dy));
        let start = Instant::now();
        let f = tvl1_flow(&a, &b, &params).unwrap();
        let elapsed = start.elapsed();
        let epe = endpoint_error(&f, dx as f32, dy as f32);
        assert!(epe < 0.3, "shift ({dx}, {dy}): endpoint error {epe}");
        assert!(elapsed.as_secs_f64() < 1.0, "shift ({dx}, {dy}) took {elapsed:?}");
    }
}

#[test]
fn reversed_pair_gives_opposite_flow() {
    let params = TvL1Params::default();
    let (a, b) = (shifted(0.0, 0.0), shifted(1.0, -0.5));
    let ab = tvl1_flow(&a, &b, &params).unwrap();
    let ba = tvl1_flow(&b, &a, &params).unwrap();
    let su = median(ab.u().iter().zip(ba.u()).map(|(x, y)| x + y).collect());
    let sv = median(ab.v().iter().zip(ba.v()).map(|(x, y)| x + y).collect());
    assert!(su.abs() < 0.3 && sv.abs() < 0.3, "sums ({su}, {sv})");
}

// Relinearizing after each warp is not a strict descent step on the true
// energy, so only the net change over a level is checked.
#[test]
fn warping_lowers_energy_on_every_level() {
    for median_filter in [false, true] {
        let params = TvL1Params {
            median_filter,
            ..TvL1Params::default()
        };
        for (dx, dy) in [(1.5, 0.5), (1.0, 0.0), (0.5, -1.5), (2.0, 2.0)] {
            let (_, traces) = tvl1_flow_traced(&shifted(0.0, 0.0), &shifted(dx, dy), &params).unwrap();
            assert_eq!(traces.len(), 3);
            for t in &traces {
                assert_eq!(t.energies.len(), params.warps);
                let (first, last) = (t.energies[0], t.energies[params.warps - 1]);
                assert!(
                    last <= first,
                    "shift ({dx}, {dy}) level {}x{}: {:?}",
                    t.height,
                    t.width,
                    t.energies
                );
            }
        }
    }
}

#[test]
fn estimate_has_lower_energy_than_zero_flow() {
    let (a, b) = (shifted(0.0, 0.0), shifted(1.0, 1.0));
    let params = TvL1Params::default();
    let f = tvl1_flow(&a, &b, &params).unwrap();
    let e_est = flow_energy(&a, &b, &f, params.lambda).unwrap();
    let e_zero = flow_energy(&a, &b, &FlowField::zeros(SIZE, SIZE), params.lambda).unwrap();
    assert!(e_est < e_zero, "{e_est} vs {e_zero}");
}

#[test]
fn deterministic() {
    let (a, b) = (shifted(0.0, 0.0), shifted(0.7, 0.3));
    let params = TvL1Params::default();
    assert_eq!(tvl1_flow(&a, &b, &params).unwrap(), tvl1_flow(&a, &b, &params).unwrap());
}

#[test]
fn input_errors() {
    let params = TvL1Params::default();
    let small = GrayFrame::constant(15, 40, 0.5).unwrap();
    assert!(matches!(tvl1_flow(&small, &small, &params), Err(frnet::Error::Data(_))));
    let other = GrayFrame::constant(64, 60, 0.5).unwrap();
    assert!(matches!(
        tvl1_flow(&shifted(0.0, 0.0), &other, &params),
        Err(frnet::Error::Data(_))
    ));
}
