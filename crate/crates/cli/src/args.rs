// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mamba_lrp::baselines::BaselineSpec;
use mamba_lrp::eval::{Replacement, DEFAULT_STEPS, DEFAULT_TOP_K, DEFAULT_XRA_K};
use mamba_lrp::lrp::{GateMode, LayerKind, RuleConfig, DEFAULT_CONV_GAMMA, DEFAULT_EPSILON};
use mamba_lrp::tasks::TaskKind;

#[derive(Parser, Debug)]
#[command(name = "mamba-lrp", version, about = "Relevance propagation for selective state space models")]
pub struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train a classifier and write a checkpoint.
    Train(TrainArgs),
    /// Explain one input and render heatmaps.
    Explain(ExplainArgs),
    /// Compare explained logits with summed relevance.
    EvalConservation(ConservationArgs),
    /// Flipping and insertion faithfulness per method.
    EvalFaithfulness(FaithfulnessArgs),
    /// Explanation-based retrieval accuracy and relevance distances.
    Needle(NeedleArgs),
    /// Faithfulness over rule combinations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: TaskKind,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Index of the first example; disjoint ranges give disjoint splits.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub needle_width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary size; defaults to the largest token id in the data plus one.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Class count; defaults to the largest label in the data plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 32)]
    pub d_inner: usize,
    #[arg(long, default_value_t = 8)]
    pub d_state: usize,
    #[arg(long, default_value_t = 4)]
    pub conv_width: usize,
    #[arg(long)]
    pub no_bias: bool,
    #[arg(long)]
    pub no_d_skip: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the per-epoch history as JSON.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// Rule toggles for the relevance propagation methods.
#[derive(Args, Debug, Clone)]
pub struct RuleArgs {
    /// Propagate through SiLU with its full gradient.
    #[arg(long)]
    pub no_silu: bool,
    /// Propagate through the SSM coefficients.
    #[arg(long)]
    pub no_ssm: bool,
    /// Propagate through the RMSNorm scale.
    #[arg(long)]
    pub no_rmsnorm: bool,
    #[arg(long, default_value = "half", value_parser = parse_gate)]
    pub gate: GateMode,
    #[arg(long, default_value_t = DEFAULT_CONV_GAMMA)]
    pub conv_gamma: f64,
    /// γ on the in/out projections and the head.
    #[arg(long, default_value_t = 0.0)]
    pub linear_gamma: f64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
}

impl RuleArgs {
    pub fn rules(&self) -> RuleConfig {
        let mut r = RuleConfig::lrp0();
        r.silu_detach = !self.no_silu;
        r.ssm_detach = !self.no_ssm;
        r.rmsnorm_detach = !self.no_rmsnorm;
        r.gate = self.gate;
        r.epsilon = self.epsilon;
        if self.conv_gamma != 0.0 {
            r = r.with_gamma(LayerKind::Conv1d, self.conv_gamma);
        }
        if self.linear_gamma != 0.0 {
            for kind in [LayerKind::InProj, LayerKind::OutProj, LayerKind::Head] {
                r = r.with_gamma(kind, self.linear_gamma);
            }
        }
        r
    }
}

/// Settings of the sampling baselines.
#[derive(Args, Debug, Clone)]
pub struct BaselineArgs {
    /// SmoothGrad noise samples or IG steps.
    #[arg(long, default_value_t = 30)]
    pub samples: usize,
    /// SmoothGrad noise std as a fraction of the embedding value range.
    #[arg(long, default_value_t = 0.15)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_mean: f64,
}

impl BaselineArgs {
    pub fn spec(&self, seed: u64, execution: mamba_lrp::par::Execution) -> BaselineSpec {
        BaselineSpec {
            noise_mean: self.noise_mean,
            noise_std: self.noise_std,
            samples: self.samples,
            seed,
            execution,
        }
    }
}

/// Checkpoint plus dataset inputs shared by the evaluation commands.
#[derive(Args, Debug, Clone)]
pub struct EvalInput {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; `.txt` and `.json` are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "data")]
    pub tokens: Option<Vec<usize>>,
    /// Take the input from a dataset instead.
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long, default_value = "mambalrp")]
    pub method: String,
    /// Class to explain; defaults to the predicted class.
    #[arg(long)]
    pub class: Option<usize>,
    #[command(flatten)]
    pub rules: RuleArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix; `.json`, `.txt` and `.html` are appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConservationArgs {
    #[command(flatten)]
    pub input: EvalInput,
    #[arg(long, default_value = "mambalrp")]
    pub method: String,
    #[command(flatten)]
    pub rules: RuleArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Args, Debug)]
pub struct FaithfulnessArgs {
    #[command(flatten)]
    pub input: EvalInput,
    #[arg(long, value_delimiter = ',', default_value = "mambalrp,gi,random")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value = "zero", value_parser = parse_replacement)]
    pub replacement: Replacement,
    #[command(flatten)]
    pub rules: RuleArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Args, Debug)]
pub struct NeedleArgs {
    #[command(flatten)]
    pub input: EvalInput,
    #[arg(long, default_value = "mambalrp")]
    pub method: String,
    #[arg(long, default_value_t = DEFAULT_XRA_K)]
    pub k: usize,
    /// Positions per attribution in the distance histogram.
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    #[command(flatten)]
    pub rules: RuleArgs,
    #[command(flatten)]
    pub baseline: BaselineArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: EvalInput,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value = "zero", value_parser = parse_replacement)]
    pub replacement: Replacement,
    #[arg(long, default_value_t = DEFAULT_CONV_GAMMA)]
    pub conv_gamma: f64,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: mamba_lrp::Error| e.to_string())
}

fn parse_gate(s: &str) -> Result<GateMode, String> {
    s.parse().map_err(|e: mamba_lrp::Error| e.to_string())
}

fn parse_replacement(s: &str) -> Result<Replacement, String> {
    s.parse().map_err(|e: mamba_lrp::Error| e.to_string())
}
