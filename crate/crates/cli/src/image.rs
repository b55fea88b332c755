//! Rasterized field images as binary PPM with a fixed blue-white-red map.

use std::path::Path;

use eitmon_core::mesh::PointLocator;
use eitmon_core::Mesh;

use crate::CliError;

/// Pixels along each side of one panel.
pub const PANEL_SIZE: usize = 128;

const BACKGROUND: [u8; 3] = [0, 0, 0];
const NEGATIVE: [f64; 3] = [0.23, 0.30, 0.75];
const POSITIVE: [f64; 3] = [0.71, 0.02, 0.15];

pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: BACKGROUND.repeat(width * height),
        }
    }

    pub fn ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.ppm_bytes()).map_err(|e| CliError::io(path, e))
    }
}

/// Maps `v / limit` in [-1, 1] to the diverging palette; white at zero.
pub fn colormap(v: f64, limit: f64) -> [u8; 3] {
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { NEGATIVE } else { POSITIVE };
    let a = t.abs();
    end.map(|c| ((1.0 - a + a * c) * 255.0).round() as u8)
}

/// Renders the nodal field: the full disk in 2D, the three orthogonal
/// mid-slices side by side in 3D.
pub fn render(mesh: &Mesh, values: &[f64], limit: f64) -> Image {
    let r = mesh.nodes().iter().flat_map(|p| p.iter().map(|c| c.abs())).fold(0.0, f64::max);
    let locator = PointLocator::new(mesh);
    let panels: Vec<Box<dyn Fn(f64, f64) -> [f64; 3]>> = if mesh.dimension() == 2 {
        vec![Box::new(|u, v| [u, v, 0.0])]
    } else {
        vec![
            Box::new(|u, v| [u, v, 0.0]),
            Box::new(|u, v| [u, 0.0, v]),
            Box::new(|u, v| [0.0, u, v]),
        ]
    };
    let mut img = Image::blank(PANEL_SIZE * panels.len(), PANEL_SIZE);
    for (k, map) in panels.iter().enumerate() {
        for row in 0..PANEL_SIZE {
            // image rows run top to bottom
            let v = r * (1.0 - 2.0 * (row as f64 + 0.5) / PANEL_SIZE as f64);
            for col in 0..PANEL_SIZE {
                let u = r * (2.0 * (col as f64 + 0.5) / PANEL_SIZE as f64 - 1.0);
                if let Some((e, lam)) = locator.locate(&map(u, v)) {
                    let px = (row * img.width + k * PANEL_SIZE + col) * 3;
                    img.rgb[px..px + 3].copy_from_slice(&colormap(locator.evaluate(values, e, &lam), limit));
                }
            }
        }
    }
    img
}
