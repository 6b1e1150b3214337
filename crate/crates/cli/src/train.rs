use std::path::Path;

use anyhow::{Context, Result};
use ems_core::ppo::{load_checkpoint, save_checkpoint, PpoError, Trainer, TrainingLog};
use ems_core::risk::enumerate_scenarios;

use crate::config::RunConfig;

fn checkpoint_name(update: u64) -> String {
    format!("update_{update:06}.ckpt")
}

/// First `updates` data rows of an existing CSV, header excluded.
fn prior_rows(path: &Path, updates: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().skip(1).take(updates as usize).map(str::to_string).collect())
}

fn write_log(path: &Path, header: &str, prior: &[String], body: &str) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for line in prior {
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(body.split_once('\n').map_or("", |(_, rest)| rest));
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(cfg: &RunConfig, episodes: Option<u64>, resume: bool) -> Result<()> {
    let model = cfg.model()?;
    let set = enumerate_scenarios(&model.failable_pofs(), cfg.threshold)?;
    let mut ppo = cfg.ppo.clone();
    if let Some(e) = episodes {
        ppo.total_episodes = e;
    }
    cfg.create_out()?;
    let ckpt_dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let policy_path = cfg.checkpoint_path();
    let log_path = cfg.out.join("training_log.csv");
    let timing_path = cfg.out.join("training_timing.csv");

    let mut trainer = Trainer::new(&model, cfg.env, set, ppo.clone())?;
    let (mut prior_log, mut prior_timing) = (Vec::new(), Vec::new());
    if resume {
        let ckpt = load_checkpoint(&policy_path).with_context(|| format!("resuming from {}", policy_path.display()))?;
        trainer.resume(ckpt)?;
        prior_log = prior_rows(&log_path, trainer.update)?;
        prior_timing = prior_rows(&timing_path, trainer.update)?;
        println!("resumed at update {} ({} episodes)", trainer.update, trainer.episodes);
    } else {
        save_checkpoint(&trainer.checkpoint(), &ckpt_dir.join(checkpoint_name(0)))?;
    }

    let every = ppo.checkpoint_every as u64;
    let started = std::time::Instant::now();
    trainer.run(|t| {
        let row = t.log.rows.last().expect("a row per update");
        if every > 0 && t.update % every == 0 {
            let ckpt = t.checkpoint();
            save_checkpoint(&ckpt, &ckpt_dir.join(checkpoint_name(t.update)))?;
            save_checkpoint(&ckpt, &policy_path)?;
            eprintln!(
                "update {} episodes {} mean_reward {:.3} repairs {:.2} ({:.0}s)",
                t.update,
                t.episodes,
                row.mean_reward,
                row.mean_repairs,
                started.elapsed().as_secs_f64()
            );
        }
        Ok::<(), PpoError>(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &policy_path)?;
    write_log(&log_path, TrainingLog::HEADER, &prior_log, &trainer.log.to_csv())?;
    write_log(&timing_path, "update,wall_clock_s", &prior_timing, &trainer.log.timing_csv())?;
    println!(
        "trained {} updates, {} episodes, config hash {:016x}",
        trainer.update,
        trainer.episodes,
        trainer.config_hash()
    );
    if let Some(last) = trainer.log.rows.last() {
        println!("final mean_reward={} mean_repairs={}", last.mean_reward, last.mean_repairs);
    }
    Ok(())
}
