use proptest::prelude::*;
use redsketch::phantom::{desk_phantom, downsample, render_phantom, rmse, Circle, PhantomSpec};

#[test]
fn desk_phantom_layout() {
    let side = 64;
    let x = render_phantom(&desk_phantom(side), 3).unwrap();
    let ch = |m: usize| &x[m * side * side..(m + 1) * side * side];
    let centre = 32 * side + 32;
    assert_eq!(ch(0)[centre], 1.0);
    assert_eq!(ch(1)[centre], 0.0);
    let max = |m: usize| ch(m).iter().cloned().fold(0.0, f64::max);
    assert_eq!(max(0), 1.0);
    assert_eq!(max(1), 2.0);
    assert_eq!(max(2), 2.0);
    assert!(x.iter().all(|v| *v >= 0.0));
    // the largest insert (k = 7, gadolinium) sits at angle 7π/4
    let a = std::f64::consts::TAU * 7.0 / 8.0;
    let (cx, cy) = (0.5 + 0.25 * a.cos(), 0.5 + 0.25 * a.sin());
    let idx = (cy * side as f64) as usize * side + (cx * side as f64) as usize;
    assert_eq!(ch(2)[idx], 2.0);
}

#[test]
fn refined_render_downsamples_to_coarse_mass() {
    let spec = desk_phantom(32);
    let coarse = render_phantom(&spec, 3).unwrap();
    let fine = downsample(&render_phantom(&spec.with_side(64), 3).unwrap(), 64, 2).unwrap();
    let (a, b): (f64, f64) = (coarse.iter().sum(), fine.iter().sum());
    assert!((a / b - 1.0).abs() < 0.01);
    assert!(rmse(&coarse, &fine, 3).unwrap().overall < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn disk_mass_tracks_area(r in 0.05f64..0.45, side in 16usize..80, conc in 0.1f64..3.0) {
        let spec = PhantomSpec {
            image_side: side,
            circles: vec![Circle { center_x: 0.5, center_y: 0.5, radius: r, material: 0, concentration: conc }],
        };
        let mass: f64 = render_phantom(&spec, 1).unwrap().iter().sum();
        let area = std::f64::consts::PI * (r * side as f64).powi(2) * conc;
        prop_assert!((mass - area).abs() <= 0.02 * area + 0.05 * conc * r * side as f64);
    }

    #[test]
    fn downsampling_preserves_the_mean(side_half in 1usize..12, seed in 0u64..1000) {
        let side = 2 * side_half;
        let x: Vec<f64> = (0..2 * side * side).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64).collect();
        let d = downsample(&x, side, 2).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&x) - mean(&d)).abs() <= 1e-9 * mean(&x).max(1.0));
    }
}
