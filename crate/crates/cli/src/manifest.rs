use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

use crate::args::Global;

/// Record of one invocation: everything needed to rerun it.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, A: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub global: &'a Global,
    pub args: &'a A,
    pub outputs: Vec<PathBuf>,
    pub elapsed_s: f64,
}

pub struct Run<'a, A: Serialize> {
    command: &'static str,
    global: &'a Global,
    args: &'a A,
    outputs: Vec<PathBuf>,
    start: Instant,
}

impl<'a, A: Serialize> Run<'a, A> {
    pub fn start(command: &'static str, global: &'a Global, args: &'a A) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&global.out_dir)
            .with_context(|| format!("creating {}", global.out_dir.display()))?;
        Ok(Self {
            command,
            global,
            args,
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().to_path_buf());
    }

    /// Writes `<out-dir>/<stem>.manifest.json` and returns its path.
    pub fn finish(self, stem: &str) -> anyhow::Result<PathBuf> {
        let path = self.global.out_dir.join(format!("{stem}.manifest.json"));
        let m = Manifest {
            tool: "csi-compress",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            global: self.global,
            args: self.args,
            outputs: self.outputs,
            elapsed_s: self.start.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
