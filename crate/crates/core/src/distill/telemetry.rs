use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const HEADER: &str = "iteration,distill_loss,ce_component,uniformity_component,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelemetryRow {
    pub iteration: usize,
    pub distill_loss: f64,
    pub ce_component: f64,
    pub uniformity_component: f64,
    pub wall_ms: u64,
}

impl TelemetryRow {
    fn to_csv(self) -> String {
        format!(
            "{},{:e},{:e},{:e},{}",
            self.iteration, self.distill_loss, self.ce_component, self.uniformity_component, self.wall_ms
        )
    }
}

/// Per-run loss log. Rows are kept in memory and, when a file is attached,
/// appended and flushed one by one so an aborted run keeps its history.
#[derive(Debug, Default)]
pub struct TelemetrySink {
    pub rows: Vec<TelemetryRow>,
    file: Option<BufWriter<File>>,
}

impl TelemetrySink {
    pub fn memory() -> Self {
        Self::default()
    }

    /// Creates `path`; the first line records the config checksum.
    pub fn to_file(path: &Path, config_checksum: Option<&str>) -> Result<Self> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "# config_checksum={}", config_checksum.unwrap_or("none"))?;
        writeln!(f, "{HEADER}")?;
        f.flush()?;
        Ok(TelemetrySink {
            rows: Vec::new(),
            file: Some(f),
        })
    }

    pub fn record(&mut self, row: TelemetryRow) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.distill_loss).collect()
    }
}
