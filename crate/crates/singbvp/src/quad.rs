//! Fixed-order Gauss-Legendre panels.

/// 6-point Gauss-Legendre nodes on [-1, 1] (positive half; symmetric).
const GL6_X: [f64; 3] = [
    0.238_619_186_083_196_9,
    0.661_209_386_466_264_5,
    0.932_469_514_203_152_0,
];
const GL6_W: [f64; 3] = [
    0.467_913_934_572_691_05,
    0.360_761_573_048_138_6,
    0.171_324_492_379_170_35,
];

/// 8-point Gauss-Legendre nodes on [-1, 1].
const GL8_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329_0,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL8_W: [f64; 4] = [
    0.362_683_783_378_362_0,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_26,
];

/// Nodes and weights of an n-point Gauss-Legendre rule on [a, b].
pub fn gauss_legendre(order: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (xs, ws): (&[f64], &[f64]) = match order {
        6 => (&GL6_X, &GL6_W),
        8 => (&GL8_X, &GL8_W),
        _ => panic!("unsupported Gauss-Legendre order {order}"),
    };
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut out = Vec::with_capacity(2 * xs.len());
    for (&x, &w) in xs.iter().zip(ws) {
        out.push((mid - half * x, w * half));
        out.push((mid + half * x, w * half));
    }
    out
}

/// Integrate a scalar function over [a, b] with composite panels.
pub fn integrate_panels<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    panels: usize,
    order: usize,
) -> f64 {
    let mut total = 0.0;
    let h = (b - a) / panels as f64;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        for (x, w) in gauss_legendre(order, lo, lo + h) {
            total += w * f(x);
        }
    }
    total
}
