//! Quadrature rules on the reference triangle {(x,y): x,y>=0, x+y<=1} and
//! the reference edge [0,1]. Weights sum to the reference measure.

/// (barycentric-free reference coordinates (x, y), weight).
pub type TriRule = &'static [([f64; 2], f64)];

const W3A: f64 = -27.0 / 96.0;
const W3B: f64 = 25.0 / 96.0;
static TRI3: [([f64; 2], f64); 4] = [
    ([1.0 / 3.0, 1.0 / 3.0], W3A),
    ([0.2, 0.2], W3B),
    ([0.6, 0.2], W3B),
    ([0.2, 0.6], W3B),
];

// 7-point rule, exact to degree 5
const A5: f64 = 0.470_142_064_105_115;
const B5: f64 = 0.101_286_507_323_456;
const WA5: f64 = 0.066_197_076_394_253;
const WB5: f64 = 0.062_969_590_272_414;
static TRI5: [([f64; 2], f64); 7] = [
    ([1.0 / 3.0, 1.0 / 3.0], 9.0 / 80.0),
    ([A5, A5], WA5),
    ([1.0 - 2.0 * A5, A5], WA5),
    ([A5, 1.0 - 2.0 * A5], WA5),
    ([B5, B5], WB5),
    ([1.0 - 2.0 * B5, B5], WB5),
    ([B5, 1.0 - 2.0 * B5], WB5),
];

/// Rule exact for polynomials up to the requested degree.
pub fn triangle_rule(degree: usize) -> TriRule {
    if degree <= 3 {
        &TRI3
    } else if degree <= 5 {
        &TRI5
    } else {
        panic!("no triangle rule of degree {degree}")
    }
}

/// 3-point Gauss-Legendre on [0,1]: exact to degree 5.
pub fn edge_rule() -> [(f64, f64); 3] {
    let s = (0.6f64).sqrt();
    [
        (0.5 * (1.0 - s), 5.0 / 18.0),
        (0.5, 8.0 / 18.0),
        (0.5 * (1.0 + s), 5.0 / 18.0),
    ]
}
