//! PSNR, SSIM and the patch-statistics FID on controlled perturbations of a
//! texture set.
//!
//!     cargo run --release --example metrics

use scaledistill::degradation::{gaussian_blur, gen_texture, Image};
use scaledistill::metrics::evaluate_sets;

fn main() -> scaledistill::Result<()> {
    let refs: Vec<Image> = (0..96).map(|s| gen_texture(s, 32, 32)).collect();
    let others: Vec<Image> = (1000..1096).map(|s| gen_texture(s, 32, 32)).collect();
    let blur = |sigma| refs.iter().map(|x| gaussian_blur(x, sigma)).collect::<Vec<_>>();
    let shift = |d| refs.iter().map(|x| x.offset(d)).collect::<Vec<_>>();

    let cases: Vec<(&str, Vec<Image>)> = vec![
        ("identical", refs.clone()),
        ("blur 0.5", blur(0.5)),
        ("blur 1.5", blur(1.5)),
        ("brightness +0.05", shift(0.05)),
        ("brightness +0.2", shift(0.2)),
        ("other textures", others),
    ];
    println!("{:<18} {:>9} {:>7} {:>9}", "case", "psnr", "ssim", "pfid");
    for (name, out) in cases {
        let r = evaluate_sets(&out, &refs)?;
        println!("{name:<18} {:>9.2} {:>7.3} {:>9.4}", r.psnr_db, r.ssim, r.pfid);
    }
    Ok(())
}
