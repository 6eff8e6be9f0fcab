//! Scale distillation in pixel space (identity autoencoder).
//!
//! Trains a x2 teacher on data, then distills x4 and x8 students that each
//! learn from the previous stage, and a half-width student of the x2
//! teacher. Prints per-stage loss curves and one-step PSNR.
//!
//!     cargo run --release --example distill -- 300

use scaledistill::autoencoder::Autoencoder;
use scaledistill::degradation::{degrade, gen_texture, DegradeMode, ScaleFactor};
use scaledistill::distillation::{run_scale_schedule, train_arch_student, LatentData, ScaleSchedule, TrainedStage};
use scaledistill::metrics::psnr;
use scaledistill::sampler::super_resolve_with;
use scaledistill::unet::NetworkConfig;

fn one_step_psnr(stage: &TrainedStage, ae: &Autoencoder, eval: &[scaledistill::degradation::Image]) -> f64 {
    let lr: Vec<_> = eval
        .iter()
        .map(|x| degrade(x, stage.scale, &DegradeMode::Bicubic, 0).unwrap())
        .collect();
    let seeds: Vec<u64> = (0..eval.len() as u64).collect();
    let sr = super_resolve_with(&stage.net, ae, &lr, stage.scale, &seeds, 1).unwrap();
    sr.iter().zip(eval).map(|(a, b)| psnr(a, b).unwrap()).sum::<f64>() / eval.len() as f64
}

fn main() -> scaledistill::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ae = Autoencoder::identity(1);
    let train: Vec<_> = (0..256).map(|s| gen_texture(s, 16, 16)).collect();
    let eval: Vec<_> = (50_000..50_032).map(|s| gen_texture(s, 16, 16)).collect();
    let data = LatentData::new(&ae, &train, DegradeMode::Bicubic)?;

    let net = NetworkConfig {
        base_channels: 16,
        time_embed_dim: 16,
        in_channels: 2,
        out_channels: 1,
        ..Default::default()
    };
    let sched = ScaleSchedule {
        scales: [2, 4, 8].map(|s| ScaleFactor::new(s).unwrap()).to_vec(),
        steps_per_stage: steps,
        batch: 16,
        lr: 1e-3,
        seed: 0,
    };
    let stages = run_scale_schedule(&data, &net, &sched)?;
    for (i, st) in stages.iter().enumerate() {
        let log = &st.metrics_log;
        let head = log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail = log[log.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        println!(
            "stage {i} {} ({:?}): loss {head:.4} -> {tail:.4}, one-step psnr {:.2} dB",
            st.scale,
            st.provenance,
            one_step_psnr(st, &ae, &eval)
        );
    }

    let small = net.with_width_scale(0.5);
    let student = train_arch_student(&stages[0], &small, &data, stages[0].scale, &sched.stage_config(0))?;
    println!(
        "half-width x2 student: {} params (teacher {}), one-step psnr {:.2} dB",
        student.net.param_count(),
        stages[0].net.param_count(),
        one_step_psnr(&student, &ae, &eval)
    );
    Ok(())
}
