//! Super-resolution with a trained pipeline and the step-count trade-off.
//!
//! Trains a learned autoencoder and a x4 latent denoiser, wraps them in an
//! `SRPipeline`, and compares DDIM with 1..16 steps against bicubic.
//!
//!     cargo run --release --example super_resolve -- 600

use scaledistill::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig};
use scaledistill::degradation::{degrade, gen_texture, resize_like, DegradeMode, ScaleFactor};
use scaledistill::distillation::{train_first_scale, LatentData, TrainConfig};
use scaledistill::metrics::evaluate_sets;
use scaledistill::sampler::SRPipeline;
use scaledistill::unet::NetworkConfig;

fn main() -> scaledistill::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let s4 = ScaleFactor::new(4)?;
    let train: Vec<_> = (0..512).map(|s| gen_texture(s, 32, 32)).collect();
    let eval: Vec<_> = (90_000..90_065).map(|s| gen_texture(s, 32, 32)).collect();

    let ae_cfg = AeTrainConfig {
        steps,
        ..Default::default()
    };
    let (ae, _) = train_autoencoder(&train, &AutoencoderConfig::default(), &ae_cfg)?;
    let data = LatentData::new(&ae, &train, DegradeMode::Bicubic)?;
    let stage = train_first_scale(&data, &NetworkConfig::default(), s4, &TrainConfig::new(steps, 16, 2e-4, 0))?;
    let pipe = SRPipeline::new(ae, stage.net, s4)?;

    let lr: Vec<_> = eval.iter().map(|x| degrade(x, s4, &DegradeMode::Bicubic, 0)).collect::<Result<_, _>>()?;
    let bicubic: Vec<_> = lr.iter().zip(&eval).map(|(l, h)| resize_like(l, h)).collect::<Result<_, _>>()?;
    let b = evaluate_sets(&bicubic, &eval)?;
    println!("bicubic   psnr {:.2}  ssim {:.3}  pfid {:.4}", b.psnr_db, b.ssim, b.pfid);
    let seeds: Vec<u64> = (0..eval.len() as u64).collect();
    for k in [1, 2, 4, 8, 16] {
        let sr = pipe.super_resolve_batch(&lr, &seeds, k)?;
        let r = evaluate_sets(&sr, &eval)?;
        println!("K={k:<2}      psnr {:.2}  ssim {:.3}  pfid {:.4}", r.psnr_db, r.ssim, r.pfid);
    }
    Ok(())
}
