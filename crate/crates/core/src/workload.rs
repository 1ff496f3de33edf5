//! Fully-connected workload descriptors.
//!
//! JSON form: `{"layers": [[in, out], ...], "batch": 32, "format": "INT8"}`,
//! with `format` optional.

use serde::{Deserialize, Serialize};

use crate::error::{MxError, Result};
use crate::formats::ElementFormat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(rename = "layers")]
    pub layer_dims: Vec<(usize, usize)>,
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<ElementFormat>,
}

impl WorkloadSpec {
    /// The pusher dynamics network: 32-256-256-256-32.
    pub fn pusher(batch: usize) -> Self {
        Self { layer_dims: vec![(32, 256), (256, 256), (256, 256), (256, 32)], batch, format: None }
    }

    pub fn with_batch(&self, batch: usize) -> Self {
        Self { batch, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.is_empty() {
            return Err(MxError::Invalid("workload has no layers".into()));
        }
        if self.batch == 0 || self.layer_dims.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(MxError::Invalid("workload dimensions must be positive".into()));
        }
        for (l, w) in self.layer_dims.windows(2).enumerate() {
            if w[0].1 != w[1].0 {
                return Err(MxError::Invalid(format!(
                    "layer {} outputs {} but layer {} takes {}",
                    l,
                    w[0].1,
                    l + 1,
                    w[1].0
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: WorkloadSpec =
            serde_json::from_str(text).map_err(|e| MxError::Decode(format!("workload JSON: {e}")))?;
        w.validate()?;
        Ok(w)
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims.iter().map(|&(i, o)| i * o).sum()
    }
}
