use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use axum::routing::post;
use axum::{Json, Router};
use clap::{Args, Parser, Subcommand};
use dxagent_core::backend::{PredictRequest, PredictResponse};
use dxagent_core::eval::{render_single, run_ablation, run_repeated, PredictionLog, SynthConfig};
use dxagent_core::llm::{ChatBackend, LlmBackendRef};
use dxagent_core::par::Execution;
use dxagent_core::{CoordinationStrategy, TaskKind};
use dxagent_gateway::GatewayConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "dxagent", version, about = "Multi-model dementia staging agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP gateway.
    Serve {
        /// TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `listen` from the config.
        #[arg(long)]
        listen: Option<String>,
        /// Overrides `data_dir` from the config.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Generate a synthetic prediction log as JSON.
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Score strategies and single models on one prediction log.
    Ablate {
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Repeat synth + ablate over consecutive seeds and print `mean±std`.
    Report {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Serve a fixed prediction on POST /predict, for wiring tests.
    MockModel {
        #[arg(long, default_value = "127.0.0.1:9100")]
        listen: String,
        #[arg(long)]
        model_id: String,
        #[arg(long, value_parser = parse_task)]
        task: TaskKind,
        /// Comma-separated probabilities in label order.
        #[arg(long)]
        probs: String,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// JSON or TOML synth config; overrides the preset flags.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    models: usize,
    #[arg(long, default_value = "diagnosis", value_parser = parse_task)]
    task: TaskKind,
    #[arg(long, default_value_t = 0.6)]
    accuracy: f64,
    #[arg(long, default_value_t = 1.0)]
    sharpness: f64,
    #[arg(long, default_value_t = 5000)]
    subjects: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated: average, vote, llm, llm:vote.
    #[arg(long, default_value = "average,vote")]
    strategies: String,
    /// LLM for llm strategies: `rule:echo-vote`, `env`, or a TOML file with an
    /// LLM backend table.
    #[arg(long)]
    llm: Option<String>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    sequential: bool,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    TaskKind::ALL
        .into_iter()
        .find(|t| t.tag() == s.to_ascii_lowercase())
        .ok_or_else(|| format!("unknown task {s:?}"))
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

impl SynthArgs {
    fn config(&self) -> Result<SynthConfig> {
        match &self.synth_config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                if path.extension().is_some_and(|e| e == "json") {
                    Ok(serde_json::from_str(&text)?)
                } else {
                    Ok(toml::from_str(&text)?)
                }
            }
            None => Ok(SynthConfig::independent(
                self.models,
                self.task,
                self.accuracy,
                self.sharpness,
                self.subjects,
            )),
        }
    }
}

impl EvalArgs {
    fn strategies(&self) -> Result<Vec<CoordinationStrategy>> {
        self.strategies
            .split(',')
            .map(|s| s.trim().parse::<CoordinationStrategy>().map_err(|e| anyhow::anyhow!("{e}")))
            .collect()
    }

    fn llm(&self) -> Result<Option<Arc<dyn ChatBackend>>> {
        let Some(spec) = &self.llm else { return Ok(None) };
        let r = if let Some(rule) = spec.strip_prefix("rule:") {
            LlmBackendRef::Rule { rule: rule.to_string() }
        } else if spec == "env" {
            LlmBackendRef::remote_from_env().context("DXAGENT_LLM_URL and DXAGENT_LLM_MODEL must be set")?
        } else {
            let text = fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
            toml::from_str(&text).with_context(|| format!("parsing {spec}"))?
        };
        Ok(Some(r.build()?))
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

async fn serve(config: Option<PathBuf>, listen: Option<String>, data_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => GatewayConfig::load(&p)?,
        None => GatewayConfig::default(),
    };
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let gateway = dxagent_gateway::build_gateway(&cfg)?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .with_context(|| format!("binding {}", cfg.listen))?;
    let addr = listener.local_addr()?;
    // Scripts and tests read this line to find the port.
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;
    tracing::info!(%addr, "gateway ready");
    axum::serve(listener, dxagent_gateway::app(gateway))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn mock_model(listen: String, model_id: String, task: TaskKind, probs: String) -> Result<()> {
    let probabilities: Vec<f64> = probs
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("parsing --probs")?;
    let response = PredictResponse {
        model_id,
        labels: task.label_space().labels().iter().map(|l| l.to_string()).collect(),
        probabilities,
    };
    if response.clone().into_distribution(task).is_err() {
        bail!("--probs is not a valid {task} distribution");
    }
    let app = Router::new().route(
        "/predict",
        post(move |Json(req): Json<PredictRequest>| {
            let response = response.clone();
            async move {
                tracing::info!(task = %req.task, inputs = req.inputs.len(), "predict");
                Json(response)
            }
        }),
    );
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DXAGENT_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve {
            config,
            listen,
            data_dir,
        } => serve(config, listen, data_dir).await,
        Command::Synth {
            synth,
            seed,
            out,
            sequential,
        } => {
            let log = synth.config()?.generate(seed, exec(sequential))?;
            write_output(out.as_deref(), &(serde_json::to_string(&log)? + "\n"))
        }
        Command::Ablate { log, eval } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let log = PredictionLog::from_json(&text)?;
            let llm = eval.llm()?;
            let table = run_ablation(&log, &eval.strategies()?, llm.as_deref(), exec(eval.sequential)).await?;
            let text = if eval.json {
                serde_json::to_string_pretty(&table)? + "\n"
            } else {
                render_single(&table)
            };
            write_output(None, &text)
        }
        Command::Report { synth, runs, seed, eval } => {
            let llm = eval.llm()?;
            let table = run_repeated(
                &synth.config()?,
                &eval.strategies()?,
                runs,
                seed,
                llm.as_deref(),
                exec(eval.sequential),
            )
            .await?;
            let text = if eval.json {
                serde_json::to_string_pretty(&table)? + "\n"
            } else {
                table.render_text()
            };
            write_output(None, &text)
        }
        Command::MockModel {
            listen,
            model_id,
            task,
            probs,
        } => mock_model(listen, model_id, task, probs).await,
    }
}
