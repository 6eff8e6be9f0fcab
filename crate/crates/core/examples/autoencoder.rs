//! Trains a small deterministic autoencoder on textures, reports
//! reconstruction quality on held-out images and saves it.
//!
//!     cargo run --release --example autoencoder -- 400

use scaledistill::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig};
use scaledistill::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use scaledistill::degradation::gen_texture;
use scaledistill::metrics::psnr;

fn main() -> scaledistill::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let train: Vec<_> = (0..256).map(|s| gen_texture(s, 32, 32)).collect();
    let held_out: Vec<_> = (10_000..10_032).map(|s| gen_texture(s, 32, 32)).collect();

    let config = AutoencoderConfig::default();
    let (ae, log) = train_autoencoder(
        &train,
        &config,
        &AeTrainConfig {
            steps,
            ..Default::default()
        },
    )?;
    for (i, chunk) in log.losses.chunks(steps.div_ceil(6).max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}+  loss {mean:.5}", i * chunk.len());
    }

    let refs: Vec<_> = held_out.iter().collect();
    let recon = ae.decode_batch(&ae.encode_batch(&refs)?)?;
    let mean_psnr = recon.iter().zip(&held_out).map(|(r, x)| psnr(r, x).unwrap()).sum::<f64>() / 32.0;
    let z = ae.encode(&held_out[0])?;
    println!("f={} latent {:?}  mean {:?}  scale {:?}", ae.factor(), z.shape(), ae.latent_mean, ae.latent_scale);
    println!("held-out reconstruction psnr {mean_psnr:.2} dB");

    let path = std::env::temp_dir().join("example_ae.ysrc");
    save_checkpoint(&path, &Checkpoint::from_autoencoder(&ae))?;
    let back = load_checkpoint(&path)?.to_autoencoder()?;
    assert_eq!(back.encode(&held_out[0])?, z);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
