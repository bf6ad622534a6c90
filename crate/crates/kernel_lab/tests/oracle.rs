use memlab_kernel_lab::kernel::mode_overlap;
use memlab_kernel_lab::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(p: usize, d: usize) -> Vec<f64> {
    GaussianCloud::sample(p, d, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().points().to_vec()
}

fn cloud(p: usize, d: usize, sigma: f64) -> GaussianCloud {
    GaussianCloud::new(d, points(p, d)[..p * d].to_vec(), sigma).unwrap()
}

/// `E[g(|u|)]` for `u ~ N(0, I_8)` by Simpson's rule on the chi density.
fn chi8(g: impl Fn(f64) -> f64) -> f64 {
    let (n, hi) = (20_000, 40.0);
    let h = hi / n as f64;
    let pdf = |r: f64| r.powi(7) * (-0.5 * r * r).exp() / 48.0;
    let f = |i: usize| {
        let r = i as f64 * h;
        pdf(r) * g(r)
    };
    let odd: f64 = (1..n).step_by(2).map(f).sum();
    let even: f64 = (2..n).step_by(2).map(f).sum();
    h / 3.0 * (f(0) + 4.0 * odd + 2.0 * even + f(n))
}

/// For `1 + r^2` only the `-2 sigma^2 u.v` cross term survives, which
/// reduces the quotient to one-dimensional radial integrals.
#[test]
fn quadratic_kernel_matches_radial_quadrature() {
    let (p, sigma) = (16, 0.02);
    let a = chi8(|r| r * r * (-r).exp());
    let b = chi8(|r| r * r * (-2.0 * r).exp());
    let exact = -2.0 * sigma * sigma * a * a / (8.0 * p as f64 * b);
    let kernel = KernelSpec::PowerLaw { coef: 1.0, nu: 2.0 };
    let est = eigen_oracle(&kernel, &cloud(p, 8, sigma), &ModeAnsatz::new(0), 200_000, 7).unwrap();
    assert!(est.warning.is_none());
    assert!((est.lambda - exact).abs() < 4.0 * est.stderr, "{est:?} vs {exact}");
}

#[test]
fn constant_kernel_has_no_eigenvalue() {
    let est = eigen_oracle(&KernelSpec::Constant, &cloud(16, 8, 0.05), &ModeAnsatz::new(3), 20_000, 1).unwrap();
    assert!(est.lambda.abs() < 1e-12, "{est:?}");
}

#[test]
fn eigenvalues_scale_with_sigma_and_size() {
    for nu in [1.0, 2.0] {
        let kernel = KernelSpec::PowerLaw { coef: 1.0, nu };
        let mode = ModeAnsatz::new(0);
        let sigmas = [0.01, 0.02, 0.05, 0.1];
        let lam: Vec<f64> =
            sigmas.iter().map(|&s| eigen_oracle(&kernel, &cloud(16, 8, s), &mode, 50_000, 2).unwrap().lambda.abs()).collect();
        let fit = fit_powerlaw(&sigmas, &lam).unwrap();
        assert!((fit.slope - nu).abs() < 0.05 * nu, "nu {nu}: sigma slope {}", fit.slope);

        let sizes = [16.0, 32.0, 64.0, 128.0, 256.0];
        let lam: Vec<f64> = sizes
            .iter()
            .map(|&p| eigen_oracle(&kernel, &cloud(p as usize, 8, 0.01), &mode, 50_000, 2).unwrap().lambda.abs())
            .collect();
        let fit = fit_powerlaw(&sizes, &lam).unwrap();
        assert!((fit.slope + 1.0).abs() < 0.05, "nu {nu}: size slope {}", fit.slope);
    }
}

#[test]
fn relu_tangent_kernel_gives_a_finite_estimate() {
    let est = eigen_oracle(&KernelSpec::ReluNtk, &cloud(16, 8, 0.02), &ModeAnsatz::new(1), 20_000, 3).unwrap();
    assert!(est.lambda.is_finite() && est.stderr.is_finite());
}

#[test]
fn modes_are_nearly_orthogonal() {
    let c = cloud(32, 8, 0.02);
    let o = mode_overlap(&c, &ModeAnsatz::new(0), &ModeAnsatz::new(5), 2_000, 4);
    assert!(o.abs() < 1e-6, "{o}");
    let same = mode_overlap(&c, &ModeAnsatz::new(2), &ModeAnsatz::new(2), 200, 4);
    assert!((same - 1.0).abs() < 1e-12);
}

#[test]
fn too_few_samples_or_bad_center_are_errors() {
    let c = cloud(8, 8, 0.02);
    assert!(eigen_oracle(&KernelSpec::Constant, &c, &ModeAnsatz::new(8), 100, 0).is_err());
    assert!(eigen_oracle(&KernelSpec::Constant, &c, &ModeAnsatz::new(0), 1, 0).is_err());
}
