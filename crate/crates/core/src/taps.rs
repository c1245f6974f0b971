//! Capture of native-resolution attention matrices and their replay into the
//! high-resolution pass.
//!
//! A denoiser hands every attention matrix it computes to an
//! [`AttentionHook`] and uses whatever matrix the hook returns. The native
//! pass installs an [`AttentionRecorder`]; the high-resolution pass installs
//! an [`AttentionReplayer`] that pairs each `(timestep, block)` with the
//! recorded native matrix, upsamples it and blends it in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::attention::{modulate_attention, upsample_attention_axes, AttnModConfig, AttnMode, AttentionMatrix};
use crate::error::{Error, Result};

/// Receives attention matrices from a denoiser and returns the one to use.
pub trait AttentionHook {
    fn on_attention(&mut self, t: usize, block: &str, matrix: AttentionMatrix) -> Result<AttentionMatrix>;
}

/// Native attention matrices keyed by `(timestep, block label)`. Written by
/// the native pass only, read-only afterwards.
#[derive(Debug, Clone, Default)]
pub struct AttentionStore {
    records: BTreeMap<(usize, String), AttentionMatrix>,
}

impl AttentionStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, t: usize, block: &str) -> Option<&AttentionMatrix> {
        self.records.get(&(t, block.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, &str)> {
        self.records.keys().map(|(t, b)| (*t, b.as_str()))
    }
}

/// Records matrices for the selected blocks during the native pass.
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    blocks: BTreeSet<String>,
    store: AttentionStore,
}

impl AttentionRecorder {
    pub fn new(blocks: BTreeSet<String>) -> Self {
        Self {
            blocks,
            store: AttentionStore::default(),
        }
    }

    pub fn into_store(self) -> AttentionStore {
        self.store
    }
}

impl AttentionHook for AttentionRecorder {
    fn on_attention(&mut self, t: usize, block: &str, matrix: AttentionMatrix) -> Result<AttentionMatrix> {
        if self.blocks.contains(block) {
            self.store
                .records
                .insert((t, block.to_string()), matrix.clone());
        }
        Ok(matrix)
    }
}

/// One substitution performed by the replayer.
#[derive(Debug, Clone, PartialEq)]
pub struct TapEvent {
    pub t: usize,
    pub block: String,
    pub tokens: usize,
    pub lambda: f64,
    pub mode: AttnMode,
}

/// Ordered log of substitutions, exportable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TapLog {
    pub events: Vec<TapEvent>,
}

impl TapLog {
    pub const CSV_HEADER: &'static str = "timestep,block,tokens,lambda,mode";

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.events {
            let _ = writeln!(s, "{},{},{},{},{}", e.t, e.block, e.tokens, e.lambda, e.mode);
        }
        s
    }
}

/// The three matrices of the most recent substitution, for visualization.
#[derive(Debug, Clone)]
pub struct AttentionSnapshot {
    pub t: usize,
    pub block: String,
    pub native: AttentionMatrix,
    pub high: AttentionMatrix,
    pub modulated: AttentionMatrix,
}

/// Substitutes `λ·U(M_native) + (1−λ)·M_high` at targeted blocks.
#[derive(Debug)]
pub struct AttentionReplayer<'a> {
    store: &'a AttentionStore,
    cfg: AttnModConfig,
    scale_h: usize,
    scale_w: usize,
    log: TapLog,
    snapshot: Option<AttentionSnapshot>,
}

impl<'a> AttentionReplayer<'a> {
    pub fn new(store: &'a AttentionStore, cfg: AttnModConfig, scale_h: usize, scale_w: usize) -> Self {
        Self {
            store,
            cfg,
            scale_h,
            scale_w,
            log: TapLog::default(),
            snapshot: None,
        }
    }

    pub fn log(&self) -> &TapLog {
        &self.log
    }

    pub fn into_parts(self) -> (TapLog, Option<AttentionSnapshot>) {
        (self.log, self.snapshot)
    }
}

impl AttentionHook for AttentionReplayer<'_> {
    fn on_attention(&mut self, t: usize, block: &str, matrix: AttentionMatrix) -> Result<AttentionMatrix> {
        if !self.cfg.targets(block, t) {
            return Ok(matrix);
        }
        let native = self.store.get(t, block).ok_or_else(|| Error::Pairing {
            t,
            block: block.to_string(),
        })?;
        let up = upsample_attention_axes(native, self.scale_h, self.scale_w, self.cfg.token_cap)?;
        let mixed = modulate_attention(&up, &matrix, &self.cfg)?;
        self.log.events.push(TapEvent {
            t,
            block: block.to_string(),
            tokens: mixed.tokens(),
            lambda: self.cfg.effective_lambda(),
            mode: self.cfg.mode,
        });
        self.snapshot = Some(AttentionSnapshot {
            t,
            block: block.to_string(),
            native: native.clone(),
            high: matrix,
            modulated: mixed.clone(),
        });
        Ok(mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks() -> BTreeSet<String> {
        BTreeSet::from(["up_block_0".to_string()])
    }

    #[test]
    fn recorder_keeps_only_selected_blocks() {
        let mut rec = AttentionRecorder::new(blocks());
        let m = AttentionMatrix::uniform(2, 2).unwrap();
        rec.on_attention(5, "up_block_0", m.clone()).unwrap();
        rec.on_attention(5, "mid_block", m.clone()).unwrap();
        let store = rec.into_store();
        assert_eq!(store.len(), 1);
        assert!(store.get(5, "up_block_0").is_some());
    }

    #[test]
    fn replayer_pairs_and_logs() {
        let mut rec = AttentionRecorder::new(blocks());
        let native = AttentionMatrix::uniform(2, 2).unwrap();
        rec.on_attention(3, "up_block_0", native).unwrap();
        let store = rec.into_store();
        let mut rep = AttentionReplayer::new(&store, AttnModConfig::default(), 2, 2);
        let mut data = vec![0.0; 256];
        for i in 0..16 {
            data[i * 16 + i] = 1.0;
        }
        let high = AttentionMatrix::new(4, 4, data).unwrap();
        let out = rep.on_attention(3, "up_block_0", high.clone()).unwrap();
        assert!((out.get(0, 0) - (0.7 / 16.0 + 0.3)).abs() < 1e-15);
        let untouched = rep.on_attention(3, "mid_block", high.clone()).unwrap();
        assert_eq!(untouched, high);
        assert!(matches!(
            rep.on_attention(2, "up_block_0", high),
            Err(Error::Pairing { t: 2, .. })
        ));
        assert_eq!(rep.log().len(), 1);
        let csv = rep.log().to_csv();
        assert_eq!(csv, "timestep,block,tokens,lambda,mode\n3,up_block_0,16,0.7,modulate\n");
    }

    #[test]
    fn off_mode_passes_through() {
        let store = AttentionStore::default();
        let mut rep = AttentionReplayer::new(&store, AttnModConfig::off(), 2, 2);
        let m = AttentionMatrix::uniform(4, 4).unwrap();
        assert_eq!(rep.on_attention(1, "up_block_0", m.clone()).unwrap(), m);
        assert!(rep.log().is_empty());
    }
}
