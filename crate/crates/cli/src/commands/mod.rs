//! One module per subcommand. Every command validates its configuration
//! before touching the output directory.

mod eval;
mod synth;
mod train;
mod xval;

use std::fs;
use std::path::Path;

pub use eval::{cmd_eval, EvalOutput, EvalSummary, LatentSeparation, LdaRow, REPORT_JSON};
pub use synth::{cmd_synth, SynthOutput};
pub use train::{cmd_train, TrainOutput, CHECKPOINT_FILE, LATENTS_FILE, LOSS_FILE};
pub use xval::{cmd_xval, BoxStats, FoldResult, XvalOutput, XvalSummary, SUMMARY_JSON};

use crate::{CliError, CliResult};

/// Which subjects a command operates on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    /// 1-based fold of a subject-wise `k`-fold plan.
    Fold { k: usize, fold: usize },
    /// Explicit subject ids.
    Subjects(Vec<String>),
}

pub(crate) fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
