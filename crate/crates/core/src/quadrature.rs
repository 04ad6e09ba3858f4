//! Fixed quadrature rules on the reference triangle and the reference edge.

/// Degree-4 symmetric rule on the reference triangle `{(x, y): x, y >= 0, x + y <= 1}`.
/// Points are barycentric triples; weights sum to the reference area 1/2.
pub const TRIANGLE_POINTS: [[f64; 3]; 6] = {
    const A: f64 = 0.445_948_490_915_964_886_318_329_253_883_05;
    const B: f64 = 0.091_576_213_509_770_743_459_571_463_402_202;
    [
        [1.0 - 2.0 * A, A, A],
        [A, 1.0 - 2.0 * A, A],
        [A, A, 1.0 - 2.0 * A],
        [1.0 - 2.0 * B, B, B],
        [B, 1.0 - 2.0 * B, B],
        [B, B, 1.0 - 2.0 * B],
    ]
};

pub const TRIANGLE_WEIGHTS: [f64; 6] = {
    const WA: f64 = 0.5 * 0.223_381_589_678_011_465_695_007_008_433_12;
    const WB: f64 = 0.5 * 0.109_951_743_655_321_867_638_326_324_900_21;
    [WA, WA, WA, WB, WB, WB]
};

/// Three-point Gauss-Legendre on `[0, 1]` (exact to degree 5). Weights sum to 1.
pub const EDGE_POINTS: [f64; 3] = [
    0.5 - 0.387_298_334_620_741_688_517_926_539_978_24,
    0.5,
    0.5 + 0.387_298_334_620_741_688_517_926_539_978_24,
];

pub const EDGE_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

pub const N_TRIANGLE: usize = TRIANGLE_POINTS.len();
pub const N_EDGE: usize = EDGE_POINTS.len();
