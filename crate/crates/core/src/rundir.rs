//! Fixed run-directory layout shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::Result;
use crate::retrieval::Index;
use crate::text::Vocab;
use crate::trainer::{history_jsonl, EpochRecord};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const PRETRAIN_HISTORY_FILE: &str = "history.pretrain.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "table.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const INDEX_FILE: &str = "index.json";
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and clears a sentinel left by an earlier failure.
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let failed = root.join(FAILED_FILE);
        if failed.exists() {
            fs::remove_file(failed)?;
        }
        Ok(Self {
            root: root.to_owned(),
        })
    }

    /// Opens an existing run directory for reading.
    pub fn open(root: &Path) -> Self {
        Self {
            root: root.to_owned(),
        }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.path(CONFIG_FILE), cfg.to_json()?)?;
        Ok(())
    }

    pub fn write_vocab(&self, vocab: &Vocab) -> Result<()> {
        vocab.save(&self.path(VOCAB_FILE))
    }

    pub fn write_checkpoint(&self, checkpoint: &Checkpoint, vocab: &Vocab) -> Result<()> {
        save_checkpoint(checkpoint, vocab, &self.path(CHECKPOINT_FILE))
    }

    pub fn write_history(&self, file: &str, history: &[EpochRecord]) -> Result<()> {
        fs::write(self.path(file), history_jsonl(history)?)?;
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, file: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(self.path(file), s)?;
        Ok(())
    }

    pub fn write_text(&self, file: &str, text: &str) -> Result<()> {
        fs::write(self.path(file), text)?;
        Ok(())
    }

    pub fn mark_failed(&self, message: &str) -> Result<()> {
        fs::write(self.path(FAILED_FILE), format!("{message}\n"))?;
        Ok(())
    }

    /// Vocabulary and checkpoint of a finished run.
    pub fn load_model(&self) -> Result<(Vocab, Checkpoint)> {
        let vocab = Vocab::load(&self.path(VOCAB_FILE))?;
        let checkpoint = load_checkpoint(&self.path(CHECKPOINT_FILE), &vocab)?;
        Ok((vocab, checkpoint))
    }

    pub fn load_index(&self) -> Result<Index> {
        let text = fs::read_to_string(self.path(INDEX_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}
