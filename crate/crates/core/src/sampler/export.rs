//! SVG rendering and an ASCII float-grid format.

use std::fmt::Write as _;
use std::path::Path;

use super::{Domain2DMesh, DomainGrid, SamplerError};

const GRID_MAGIC: &str = "ATLASFORGE-GRID 1";
const SVG_SIZE: f64 = 512.0;
const HEAT_CELLS: usize = 64;

/// Boundary polylines over an optional density heat raster. Output depends
/// only on the inputs.
pub fn domain_svg(mesh: &Domain2DMesh, grid: Option<&DomainGrid>) -> String {
    let (lo, hi) = match grid {
        Some(g) => (g.min, g.max),
        None => mesh.bounds(),
    };
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let sx = |x: f64| (x - lo[0]) / span * SVG_SIZE;
    let sy = |y: f64| SVG_SIZE - (y - lo[1]) / span * SVG_SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">",
        SVG_SIZE
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    if let Some(g) = grid {
        let vmax = g.values.iter().copied().fold(0.0, f64::max).max(1e-300);
        let n = HEAT_CELLS.min(g.resolution);
        let cw = (g.max[0] - g.min[0]) / n as f64;
        let ch = (g.max[1] - g.min[1]) / n as f64;
        let _ = writeln!(s, "<g id=\"density\">");
        for j in 0..n {
            for i in 0..n {
                let x = g.min[0] + (i as f64 + 0.5) * cw;
                let y = g.min[1] + (j as f64 + 0.5) * ch;
                let v = (g.density_at([x, y]) / vmax).clamp(0.0, 1.0);
                if v < 1e-3 {
                    continue;
                }
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"rgb(255,{shade},{shade})\"/>",
                    sx(x - 0.5 * cw),
                    sy(y + 0.5 * ch),
                    cw / span * SVG_SIZE,
                    ch / span * SVG_SIZE,
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "<g id=\"boundary\" fill=\"none\" stroke=\"black\" stroke-width=\"1\">");
    for lp in &mesh.boundaries {
        let pts: Vec<String> = lp
            .iter()
            .map(|&v| format!("{:.3},{:.3}", sx(mesh.vertices[v][0]), sy(mesh.vertices[v][1])))
            .collect();
        let _ = writeln!(s, "<polygon points=\"{}\"/>", pts.join(" "));
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

/// Header lines for the box, resolution and threshold, then one line of
/// values per grid row.
pub fn write_grid(grid: &DomainGrid) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{GRID_MAGIC}");
    let _ = writeln!(s, "bbox {:e} {:e} {:e} {:e}", grid.min[0], grid.min[1], grid.max[0], grid.max[1]);
    let _ = writeln!(s, "resolution {}", grid.resolution);
    let _ = writeln!(s, "tau {:e}", grid.tau);
    for row in grid.values.chunks(grid.resolution) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

pub fn parse_grid(text: &str) -> Result<DomainGrid, SamplerError> {
    let bad = |m: &str| SamplerError::GridFormat(m.to_string());
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(GRID_MAGIC) {
        return Err(bad("missing header"));
    }
    let mut field = |name: &str, count: usize| -> Result<Vec<f64>, SamplerError> {
        let line = lines.next().ok_or_else(|| bad("truncated header"))?;
        let mut it = line.split_whitespace();
        if it.next() != Some(name) {
            return Err(bad(&format!("expected '{name}'")));
        }
        let vals: Vec<f64> = it
            .map(|t| t.parse().map_err(|_| bad(&format!("bad number '{t}'"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != count {
            return Err(bad(&format!("'{name}' expects {count} values")));
        }
        Ok(vals)
    };
    let bbox = field("bbox", 4)?;
    let r = field("resolution", 1)?[0] as usize;
    let tau = field("tau", 1)?[0];
    let mut values = Vec::with_capacity(r * r);
    for line in lines {
        for t in line.split_whitespace() {
            values.push(t.parse().map_err(|_| bad(&format!("bad number '{t}'")))?);
        }
    }
    if values.len() != r * r {
        return Err(bad(&format!("expected {} values, found {}", r * r, values.len())));
    }
    DomainGrid::from_values([bbox[0], bbox[1]], [bbox[2], bbox[3]], r, tau, values)
}

pub fn read_grid(path: &Path) -> Result<DomainGrid, SamplerError> {
    let text = std::fs::read_to_string(path).map_err(|e| SamplerError::GridFormat(format!("{}: {e}", path.display())))?;
    parse_grid(&text)
}
