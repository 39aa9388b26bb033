//! Implicit shape definitions in a local frame where every shape fits in the
//! unit disk.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Star5,
    Cross,
    Ellipse,
    Ring,
    Diamond,
    Crescent,
    Hexagon,
    Bar,
    LShape,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Star5,
        ShapeFamily::Cross,
        ShapeFamily::Ellipse,
        ShapeFamily::Ring,
        ShapeFamily::Diamond,
        ShapeFamily::Crescent,
        ShapeFamily::Hexagon,
        ShapeFamily::Bar,
        ShapeFamily::LShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Circle => "circle",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Star5 => "star5",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Crescent => "crescent",
            ShapeFamily::Hexagon => "hexagon",
            ShapeFamily::Bar => "bar",
            ShapeFamily::LShape => "l-shape",
        }
    }

    /// Whether local point `(u, v)` lies inside the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeFamily::Circle => u * u + v * v <= 1.0,
            ShapeFamily::Square => u.abs() <= 0.7 && v.abs() <= 0.7,
            ShapeFamily::Triangle => in_regular_polygon(u, v, 3, 1.0, PI / 2.0),
            ShapeFamily::Star5 => in_star(u, v, 5, 1.0, 0.45),
            ShapeFamily::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95)
            }
            ShapeFamily::Ellipse => u * u + (v / 0.55).powi(2) <= 1.0,
            ShapeFamily::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeFamily::Diamond => u.abs() / 0.7 + v.abs() <= 1.0,
            ShapeFamily::Crescent => {
                u * u + v * v <= 1.0 && (u - 0.45).powi(2) + v * v > 0.85 * 0.85
            }
            ShapeFamily::Hexagon => in_regular_polygon(u, v, 6, 1.0, 0.0),
            ShapeFamily::Bar => u.abs() <= 0.95 && v.abs() <= 0.3,
            ShapeFamily::LShape => {
                ((-0.65..=-0.15).contains(&u) && (-0.7..=0.7).contains(&v))
                    || ((-0.65..=0.65).contains(&u) && (0.2..=0.7).contains(&v))
            }
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn in_polygon(u: f64, v: f64, vertices: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = vertices.len() - 1;
    for i in 0..vertices.len() {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn in_regular_polygon(u: f64, v: f64, sides: usize, radius: f64, phase: f64) -> bool {
    let vertices: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / sides as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect();
    in_polygon(u, v, &vertices)
}

fn in_star(u: f64, v: f64, points: usize, outer: f64, inner: f64) -> bool {
    let vertices: Vec<(f64, f64)> = (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = PI / 2.0 + PI * i as f64 / points as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    in_polygon(u, v, &vertices)
}
