//! Visual inspection: high-pass masks and per-query attention heatmaps.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::freq::{make_filter, FilterParams};
use crate::io::{read_famlat, render_plane, Pgm};
use crate::pipeline::{layout, parse_dims, Manifest};

/// Row sums read back from FAMLAT (stored as f32) must be within this of 1.
pub const RENDER_ROW_SUM_TOL: f64 = 1e-4;

/// `K(t)` in DC-centered layout, 0 → black and 1 → white.
pub fn filter_mask_pgm(params: &FilterParams, t: usize) -> Result<Pgm> {
    let f = make_filter(params, t)?;
    Ok(render_plane(f.mask(), f.height(), f.width(), Some((0.0, 1.0))))
}

/// One heatmap of an attention row over its token grid.
#[derive(Debug, Clone)]
pub struct AttentionPanel {
    pub name: &'static str,
    /// Row index inside this panel's matrix.
    pub query: usize,
    pub row_sum: f64,
    pub pgm: Pgm,
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::NotFound(path.display().to_string()))
    }
}

/// Reads the attention snapshot of a run directory and renders the row of
/// `query` (an index into the high-resolution token grid) for the native,
/// high-resolution and modulated matrices. The native row is the one of the
/// native token that the query falls into.
pub fn attention_panels(run_dir: impl AsRef<Path>, query: usize) -> Result<Vec<AttentionPanel>> {
    let dir = run_dir.as_ref();
    let manifest = Manifest::parse(&std::fs::read_to_string(require(&dir.join(layout::MANIFEST))?)?)?;
    let grid = |key: &str| -> Result<(usize, usize)> {
        let v = manifest
            .get(key)
            .ok_or_else(|| Error::NotFound(format!("{key} in {}", dir.join(layout::MANIFEST).display())))?;
        parse_dims(v)
    };
    let (nh, nw) = grid("attn.snapshot.native_grid")?;
    let (hh, hw) = grid("attn.snapshot.high_grid")?;
    if query >= hh * hw {
        return Err(Error::Parameter(format!(
            "query {query} outside the {hh}x{hw} token grid"
        )));
    }
    let (qy, qx) = (query / hw, query % hw);
    let native_query = (qy * nh / hh) * nw + qx * nw / hw;

    let mut panels = Vec::with_capacity(3);
    for (name, file, (gh, gw), q) in [
        ("native", layout::ATTN_NATIVE, (nh, nw), native_query),
        ("high", layout::ATTN_HIGH, (hh, hw), query),
        ("modulated", layout::ATTN_MODULATED, (hh, hw), query),
    ] {
        let m = read_famlat(require(&dir.join(file))?)?;
        let n = gh * gw;
        if m.dims() != (1, n, n) {
            return Err(Error::Shape(format!(
                "{file} is {:?}, expected 1x{n}x{n}",
                m.dims()
            )));
        }
        let row = &m.data()[q * n..(q + 1) * n];
        let row_sum: f64 = row.iter().sum();
        if (row_sum - 1.0).abs() > RENDER_ROW_SUM_TOL {
            return Err(Error::Numeric(format!("{file} row {q} sums to {row_sum}")));
        }
        panels.push(AttentionPanel {
            name,
            query: q,
            row_sum,
            pgm: render_plane(row, gh, gw, None),
        });
    }
    Ok(panels)
}

/// Writes `attn_<name>_q<query>.pgm` for each panel into `out_dir`.
pub fn write_attention_panels(
    run_dir: impl AsRef<Path>,
    query: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    attention_panels(run_dir, query)?
        .into_iter()
        .map(|p| {
            let path = out_dir.join(format!("attn_{}_q{query}.pgm", p.name));
            p.pgm.write(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserSpec, ToyNetConfig};
    use crate::pipeline::{run, write_outputs, RunConfig};

    #[test]
    fn mask_render_extremes() {
        let p = FilterParams::new(0.5, 1000, 64, 64).unwrap();
        let at0 = filter_mask_pgm(&p, 0).unwrap();
        assert_eq!(at0.pixels[32 * 64 + 32], 0);
        assert_eq!(at0.pixels[0], 255);
        assert_eq!(at0.pixels.iter().filter(|&&v| v == 0).count(), 31 * 31);
        let at_t = filter_mask_pgm(&p, 1000).unwrap();
        assert!(at_t.pixels.iter().all(|&v| v == 255));
    }

    #[test]
    fn panels_from_a_toy_run() {
        let cfg = RunConfig {
            native_h: 8,
            native_w: 8,
            steps: 3,
            denoiser: DenoiserSpec::ToyAttentionNet(ToyNetConfig::default()),
            ..RunConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &run(&cfg).unwrap()).unwrap();
        let panels = attention_panels(dir.path(), 12).unwrap();
        assert_eq!(panels.len(), 3);
        for p in &panels {
            assert!((p.row_sum - 1.0).abs() <= RENDER_ROW_SUM_TOL);
        }
        // Query 12 on the 16x16 grid is (0, 12); its native parent is (0, 6).
        assert_eq!(panels[0].query, 6);
        assert_eq!((panels[0].pgm.width, panels[1].pgm.width), (8, 16));
        assert!(attention_panels(dir.path(), 256).is_err());

        let out = write_attention_panels(dir.path(), 12, dir.path().join("inspect")).unwrap();
        assert!(out.iter().all(|p| p.exists()));
    }

    #[test]
    fn missing_run_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(attention_panels(dir.path(), 0), Err(Error::NotFound(_))));
    }
}
