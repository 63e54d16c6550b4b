//! Command-line front end: one subcommand per pipeline stage.
//!
//! Configuration comes from built-in defaults, then the `--config` file
//! (flat `key = value` lines), then per-key flags (`--key-name value`), then
//! the global `--seed`.

pub mod pipeline;
pub mod run_record;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use octscreen::config::KvConfig;
use octscreen::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// (config key, flag name) pairs accepted by `synth`.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("n_patients", "n-patients"),
    ("visits_per_patient", "visits-per-patient"),
    ("volumes_per_visit", "volumes-per-visit"),
    ("bscans_per_volume", "bscans-per-volume"),
    ("height", "height"),
    ("width", "width"),
    ("glaucoma_prevalence", "glaucoma-prevalence"),
    ("vf_missing_rate", "vf-missing-rate"),
    ("structure_function_noise", "structure-function-noise"),
    ("image_noise", "image-noise"),
    ("class_overlap", "class-overlap"),
    ("split_ratios", "split-ratios"),
];

pub const EMBED_KEYS: &[(&str, &str)] = &[
    ("stem_width", "stem-width"),
    ("block_widths", "block-widths"),
    ("embed_dim", "embed-dim"),
    ("backbone_epochs", "backbone-epochs"),
    ("backbone_batch_size", "backbone-batch-size"),
    ("backbone_lr", "backbone-lr"),
    ("momentum", "momentum"),
    ("weight_decay", "weight-decay"),
];

pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("mode", "mode"),
    ("batch_size", "batch-size"),
    ("epochs", "epochs"),
    ("lr", "lr"),
    ("lr_step", "lr-step"),
    ("lr_gamma", "lr-gamma"),
    ("momentum", "momentum"),
    ("weight_decay", "weight-decay"),
    ("alpha_vfi", "alpha-vfi"),
    ("alpha_md", "alpha-md"),
    ("alpha_psd", "alpha-psd"),
    ("patience", "patience"),
    ("hflip", "hflip"),
    ("triplets_per_volume", "triplets-per-volume"),
    ("stem_width", "stem-width"),
    ("block_widths", "block-widths"),
    ("reg_width", "reg-width"),
];

fn key_args(keys: &'static [(&'static str, &'static str)]) -> Vec<Arg> {
    keys.iter()
        .map(|&(key, flag)| {
            Arg::new(key)
                .long(flag)
                .overrides_with(key)
                .value_name("VALUE")
                .help(format!("Override config key '{key}'"))
        })
        .collect()
}

fn path_arg(id: &'static str, help: &'static str) -> Arg {
    Arg::new(id)
        .long(id)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

pub fn command() -> Command {
    Command::new("octscreen")
        .about("Glaucoma screening pipeline on OCT volumes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(path_arg("config", "Flat key = value configuration file").global(true))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("SEED")
                .global(true)
                .help("Random seed for every stochastic step"),
        )
        .arg(path_arg("out", "Output directory").global(true).default_value("out"))
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic cohort with train/val/test splits")
                .args(key_args(SYNTH_KEYS)),
        )
        .subcommand(
            Command::new("embed")
                .about("Train the slice classifier and cache volume embeddings")
                .arg(path_arg("train", "Training manifest").required(true))
                .arg(path_arg("val", "Validation manifest for checkpoint selection"))
                .args(key_args(EMBED_KEYS)),
        )
        .subcommand(
            Command::new("label")
                .about("Assign surrogate VF labels to training volumes without VF")
                .arg(path_arg("features", "Feature cache written by embed").required(true))
                .arg(path_arg("manifest", "Training manifest").required(true)),
        )
        .subcommand(
            Command::new("train")
                .about("Train the multi-task network")
                .arg(path_arg("train", "Training manifest").required(true))
                .arg(path_arg("val", "Validation manifest").required(true))
                .arg(
                    Arg::new("resume")
                        .long("resume")
                        .action(ArgAction::SetTrue)
                        .help("Continue the run saved in the output directory"),
                )
                .args(key_args(TRAIN_KEYS)),
        )
        .subcommand(
            Command::new("eval")
                .about("Score a trained model at volume and case level")
                .arg(path_arg("test", "Test manifest").required(true))
                .arg(path_arg("model", "Model checkpoint written by train").required(true)),
        )
        .subcommand(
            Command::new("cam")
                .about("Write the class activation map of one B-scan triplet")
                .arg(path_arg("model", "Model checkpoint written by train").required(true))
                .arg(path_arg("manifest", "Manifest listing the volume").required(true))
                .arg(
                    Arg::new("volume-id")
                        .long("volume-id")
                        .value_name("ID")
                        .required(true),
                )
                .arg(
                    Arg::new("center")
                        .long("center")
                        .value_name("INDEX")
                        .value_parser(clap::value_parser!(usize))
                        .help("Centre slice of the triplet (default: middle)"),
                ),
        )
}

/// Effective configuration of a subcommand invocation.
pub fn config_from_matches(
    m: &ArgMatches,
    keys: &[(&str, &str)],
) -> octscreen::Result<KvConfig> {
    let mut kv = match m.get_one::<PathBuf>("config") {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::new(),
    };
    for &(key, _) in keys {
        if let Some(v) = m.get_one::<String>(key) {
            kv.set(key, v);
        }
    }
    if let Some(seed) = m.get_one::<String>("seed") {
        kv.set("seed", seed);
    }
    Ok(kv)
}

fn flag_name(field: &str) -> String {
    format!("--{}", field.replace('_', "-"))
}

/// Human-readable error line, naming the flag for bad configuration values.
pub fn describe(e: &Error) -> String {
    match e {
        Error::InvalidValue { field, message } => {
            format!("invalid value for {}: {message}", flag_name(field))
        }
        other => other.to_string(),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn required<'a>(m: &'a ArgMatches, id: &str) -> &'a Path {
    m.get_one::<PathBuf>(id).expect("required by clap")
}

fn dispatch(m: &ArgMatches) -> octscreen::Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let out = required(sub, "out");
    match name {
        "synth" => {
            let o = pipeline::synth(out, &config_from_matches(sub, SYNTH_KEYS)?)?;
            println!("wrote {}", o.manifest.display());
        }
        "embed" => {
            let kv = config_from_matches(sub, EMBED_KEYS)?;
            let val = sub.get_one::<PathBuf>("val").map(PathBuf::as_path);
            let o = pipeline::embed(out, required(sub, "train"), val, &kv)?;
            println!(
                "checkpoint {} ({}), features {} ({})",
                o.checkpoint.display(),
                if o.reused_checkpoint { "unchanged" } else { "trained" },
                o.features.display(),
                if o.reused_features { "cache up to date" } else { "extracted" },
            );
        }
        "label" => {
            let o = pipeline::label(out, required(sub, "features"), required(sub, "manifest"))?;
            let [gl, gu, nl, nu] = o.group_counts;
            println!(
                "groups G^l={gl} G^u={gu} N^l={nl} N^u={nu}; {} surrogate labels -> {}",
                o.assignments.len(),
                o.manifest.display()
            );
        }
        "train" => {
            let kv = config_from_matches(sub, TRAIN_KEYS)?;
            let o = pipeline::train(
                out,
                required(sub, "train"),
                required(sub, "val"),
                &kv,
                sub.get_flag("resume"),
            )?;
            match o.best_epoch {
                Some(e) => println!("model {} (best epoch {e})", o.model.display()),
                None => println!("model {} (no validated epoch)", o.model.display()),
            }
        }
        "eval" => {
            let r = pipeline::eval(out, required(sub, "test"), required(sub, "model"))?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            println!(
                "image level: acc {:.4} f1 {:.4} auc {}; case level: acc {:.4} f1 {:.4} auc {}",
                r.image_level.accuracy,
                r.image_level.f1,
                fmt(r.image_level.auc),
                r.case_level.accuracy,
                r.case_level.f1,
                fmt(r.case_level.auc)
            );
        }
        "cam" => {
            let o = pipeline::cam(
                out,
                required(sub, "manifest"),
                required(sub, "model"),
                sub.get_one::<String>("volume-id").expect("required by clap"),
                sub.get_one::<usize>("center").copied(),
            )?;
            println!("wrote {} and {}", o.heatmap_png.display(), o.overlay_png.display());
        }
        _ => unreachable!("unknown subcommand"),
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match dispatch(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}
