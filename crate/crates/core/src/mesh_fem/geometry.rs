//! Channel geometry description and its validity rules.

use super::MeshError;

/// Rectangular channel with one interior circular cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelGeometry {
    pub length: f64,
    pub height: f64,
    pub cylinder_center: (f64, f64),
    pub cylinder_diameter: f64,
}

impl Default for ChannelGeometry {
    fn default() -> Self {
        Self {
            length: 1.2,
            height: 0.5,
            cylinder_center: (0.2, 0.25),
            cylinder_diameter: 0.1,
        }
    }
}

impl ChannelGeometry {
    /// The cylinder must sit strictly inside the channel.
    pub fn validate(&self) -> Result<(), MeshError> {
        let mut problems = Vec::new();
        if !(self.length > 0.0) {
            problems.push(format!("length {} must be positive", self.length));
        }
        if !(self.height > 0.0) {
            problems.push(format!("height {} must be positive", self.height));
        }
        if !(self.cylinder_diameter > 0.0) {
            problems.push(format!("diameter {} must be positive", self.cylinder_diameter));
        }
        let (x0, y0) = self.cylinder_center;
        let r = self.cylinder_diameter / 2.0;
        if !(x0 - r > 0.0 && x0 + r < self.length) {
            problems.push(format!("cylinder x extent [{}, {}] leaves (0, {})", x0 - r, x0 + r, self.length));
        }
        if !(y0 - r > 0.0 && y0 + r < self.height) {
            problems.push(format!("cylinder y extent [{}, {}] leaves (0, {})", y0 - r, y0 + r, self.height));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MeshError::RejectedInput(problems.join("; ")))
        }
    }

    pub fn radius(&self) -> f64 {
        self.cylinder_diameter / 2.0
    }

    pub fn distance_to_cylinder(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = self.cylinder_center;
        ((x - x0).powi(2) + (y - y0).powi(2)).sqrt() - self.radius()
    }
}
