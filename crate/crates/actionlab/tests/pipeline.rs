//! End-to-end statistical pipeline checks: exact closed forms in degenerate
//! environments, common-random-number pairing across frames, and the
//! convexity and monotonicity structure the estimators are built to expose.

use actionlab::asymptotics::{
    effective_hamiltonian, estimate_family, mean_and_stderr, Replication,
};
use actionlab::environment::{sample_environment, EnvironmentSpec, Potential, Window};
use actionlab::kinetics::KineticEnergy;
use actionlab::solver::{build_field_table, solve, solve_from, solve_with_table, Frame, GridSpec};

#[test]
fn uniform_fields_shift_loop_values_by_beta_times_level() {
    // With a constant field the best loop is the straight one, so the value
    // is exactly horizon * (alpha * L(v) + beta * level).
    let kin = KineticEnergy::quadratic(1.0);
    let grid = GridSpec {
        dimension: 1,
        dt: 0.1,
        dx: 0.05,
        steps: 80,
        velocity_window: 3,
        half_extent_nodes: 240,
    };
    for (v, alpha, beta, level) in [
        (0.0, 1.0, 1.0, 0.75),
        (0.5, 1.0, 1.0, -0.4),
        (1.0, 0.7, 1.3, 0.2),
        (0.5, 1.2, 0.6, 0.0),
    ] {
        let pot = Potential::Uniform { dimension: 1, value: level };
        let frame = Frame { v: vec![v], alpha, beta };
        let stack = solve(&pot, &kin, &grid, &frame).unwrap();
        let got = stack.point_to_point_action(&[0.0]).unwrap();
        let expected = grid.horizon() * (alpha * kin.eval(&[v]) + beta * level);
        assert!(
            (got - expected).abs() <= 1e-9,
            "v={v} alpha={alpha} beta={beta} level={level}: {got} vs {expected}"
        );
    }
}

#[test]
fn concatenated_horizons_are_subadditive_in_the_plane() {
    let kin = KineticEnergy::quadratic(1.0);
    let grid = GridSpec {
        dimension: 2,
        dt: 0.25,
        dx: 0.25,
        steps: 16,
        velocity_window: 2,
        half_extent_nodes: 24,
    };
    let spec = EnvironmentSpec::standard(2);
    let half = grid.half_extent_nodes as f64 * grid.dx + 1.0;
    let window = Window::boxed(0.0, grid.horizon(), vec![-half; 2], vec![half; 2]);
    let frame = Frame { v: vec![0.0, 0.0], alpha: 1.0, beta: 1.0 };

    for seed in [2u64, 5, 11] {
        let pot = Potential::Cloud(sample_environment(&spec, &window, seed).unwrap());
        let table = build_field_table(&pot, &grid, &frame).unwrap();
        let stack = solve_with_table(&pot, &kin, &grid, &frame, &table).unwrap();
        let full = stack.point_to_point_action(&[0.0, 0.0]).unwrap();

        // Splitting the horizon at any loop waypoint can only add cost.
        for cut in [4usize, 8, 12] {
            let first = stack.value_at(cut, &[0, 0]).unwrap();
            let rest = solve_from(&pot, &kin, &grid, &frame, &table, cut, &[0, 0])
                .unwrap()
                .value_at(grid.steps, &[0, 0])
                .unwrap();
            assert!(
                full <= first + rest + 1e-12,
                "seed {seed} cut {cut}: {full} > {} + {}",
                first,
                rest
            );
        }
    }
}

fn standard_family(
    velocities: &[f64],
    steps: usize,
    replicates: usize,
    with_gradients: bool,
) -> actionlab::asymptotics::FamilyEstimate {
    let spec = EnvironmentSpec::standard(1);
    let kin = KineticEnergy::quadratic(1.0);
    let grid = GridSpec {
        dimension: 1,
        dt: 0.1,
        dx: 0.05,
        steps,
        velocity_window: 4,
        half_extent_nodes: 400,
    };
    let frames: Vec<Frame> = velocities
        .iter()
        .map(|&v| Frame { v: vec![v], alpha: 1.0, beta: 1.0 })
        .collect();
    let repl = Replication { replicates, base_seed: 2024 };
    estimate_family(&spec, &kin, &grid, &frames, &repl, with_gradients).unwrap()
}

#[test]
fn envelope_gradients_track_central_differences_seed_by_seed() {
    // Common random numbers pair the frames, so the envelope gradient at
    // the middle velocity and the centered difference of the flanking
    // shapes agree replicate by replicate up to an O(h^2 + 1/T) residual
    // that the pooled standard error dominates.
    let family = standard_family(&[0.0, 0.5, 1.0], 500, 6, true);
    let grads = family.gradients.as_ref().unwrap();
    let diffs: Vec<f64> = (0..family.seeds.len())
        .map(|i| {
            let fd = (family.shapes[2].per_seed[i] - family.shapes[0].per_seed[i]) / 1.0;
            grads[1].per_seed[i][0] - fd
        })
        .collect();
    let (mean, se) = mean_and_stderr(&diffs);
    let tol = f64::max(0.05, 3.0 * se);
    assert!(
        mean.abs() <= tol,
        "gradient vs centered difference: mean {mean}, stderr {se}"
    );
}

#[test]
fn shape_estimates_are_convex_along_the_velocity_line() {
    let family = standard_family(&[-1.0, 0.0, 1.0], 500, 8, false);
    let margins: Vec<f64> = (0..family.seeds.len())
        .map(|i| {
            0.5 * (family.shapes[0].per_seed[i] + family.shapes[2].per_seed[i])
                - family.shapes[1].per_seed[i]
        })
        .collect();
    let (mean, se) = mean_and_stderr(&margins);
    assert!(
        mean >= -3.0 * se,
        "midpoint convexity margin {mean} below -3 stderr {se}"
    );
}

#[test]
fn conjugate_slopes_from_estimates_increase_with_velocity() {
    let family = standard_family(&[-1.0, -0.5, 0.0, 0.5, 1.0], 300, 6, true);
    let p_grid: Vec<Vec<f64>> = (-4..=4).map(|j| vec![j as f64 * 0.25]).collect();
    let ham = effective_hamiltonian(
        &family.shapes,
        family.gradients.as_deref(),
        &p_grid,
    )
    .unwrap();
    assert_eq!(ham.values.len(), p_grid.len());
    assert!(ham.values.iter().all(|h| h.is_finite()));
    let mono = ham.monotonicity.unwrap();
    assert!(mono > 0.0, "gradient monotonicity quotient {mono} not positive");

    // The conjugate itself is convex in p on a line, so its second
    // differences are nonnegative up to estimation noise.
    for w in ham.values.windows(3) {
        assert!(
            w[0] + w[2] - 2.0 * w[1] >= -1e-6,
            "conjugate second difference negative: {:?}",
            w
        );
    }
}
