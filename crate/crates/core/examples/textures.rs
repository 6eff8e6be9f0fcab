//! Procedural textures and their LR observations.
//!
//! Writes one texture and its x2/x4/x8 bicubic and "lite" degradations as
//! PNGs, then prints how much a plain bicubic round trip loses at each scale.
//!
//!     cargo run --example textures -- /tmp/textures

use std::path::PathBuf;

use scaledistill::degradation::{degrade, gen_texture, resize_like, write_png, DegradeMode, LiteParams, ScaleFactor};
use scaledistill::metrics::{psnr, ssim};

fn main() -> scaledistill::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "textures_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| scaledistill::Error::io(&out, e))?;

    let hr = gen_texture(7, 64, 64);
    write_png(&out.join("hr.png"), &hr)?;
    let lite = DegradeMode::Lite(LiteParams::default());
    for s in ScaleFactor::ALLOWED {
        let s = ScaleFactor::new(s)?;
        for (name, mode) in [("bicubic", DegradeMode::Bicubic), ("lite", lite)] {
            let lr = degrade(&hr, s, &mode, 42)?;
            write_png(&out.join(format!("{name}_{s}.png")), &lr)?;
        }
    }

    println!("bicubic round trip over 64 textures (64x64):");
    let corpus: Vec<_> = (0..64).map(|seed| gen_texture(seed, 64, 64)).collect();
    for s in ScaleFactor::ALLOWED {
        let s = ScaleFactor::new(s)?;
        let (mut p, mut q) = (0.0, 0.0);
        for x in &corpus {
            let back = resize_like(&degrade(x, s, &DegradeMode::Bicubic, 0)?, x)?;
            p += psnr(&back, x)?;
            q += ssim(&back, x)?;
        }
        let n = corpus.len() as f64;
        println!("  {s}: psnr {:.2} dB  ssim {:.3}", p / n, q / n);
    }
    println!("wrote images to {}", out.display());
    Ok(())
}
