use serde::{Deserialize, Serialize};

/// Shape families. Consecutive pairs look alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    RoundedSquare,
    Disk,
    Ring,
    Triangle,
    Trapezoid,
    Plus,
    ThickPlus,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::RoundedSquare,
        Shape::Disk,
        Shape::Ring,
        Shape::Triangle,
        Shape::Trapezoid,
        Shape::Plus,
        Shape::ThickPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::RoundedSquare => "rounded_square",
            Shape::Disk => "disk",
            Shape::Ring => "ring",
            Shape::Triangle => "triangle",
            Shape::Trapezoid => "trapezoid",
            Shape::Plus => "plus",
            Shape::ThickPlus => "thick_plus",
        }
    }

    /// Whether the point `(u, v)` of the unit box (v pointing down) is
    /// covered.
    pub fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            Shape::Square => true,
            Shape::RoundedSquare => {
                const R: f64 = 0.3;
                let cu = du.abs() - (0.5 - R);
                let cv = dv.abs() - (0.5 - R);
                cu <= 0.0 || cv <= 0.0 || cu * cu + cv * cv <= R * R
            }
            Shape::Disk => du * du + dv * dv <= 0.25,
            Shape::Ring => {
                let d = du * du + dv * dv;
                (0.04..=0.25).contains(&d)
            }
            Shape::Triangle => du.abs() <= 0.06 + 0.44 * v,
            Shape::Trapezoid => du.abs() <= 0.2 + 0.3 * v,
            Shape::Plus => du.abs() <= 0.15 || dv.abs() <= 0.15,
            Shape::ThickPlus => du.abs() <= 0.24 || dv.abs() <= 0.24,
        }
    }
}

/// Coverage mask of `shape` drawn into a `w x h` pixel box, sampled at
/// pixel centers, row-major.
pub fn shape_mask(shape: Shape, w: usize, h: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            mask.push(shape.covers((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64));
        }
    }
    mask
}
