//! The closed-form training helpers: cosine decay, label smoothing, swish,
//! mixup and nearest-neighbour upscaling.

use sipa::trainmath::{
    compensated_sum, cosine_lr, label_smooth, mixup, nn_upscale, swish, BetaSampler, CosineScheduleParams, Image,
};

fn main() -> anyhow::Result<()> {
    let p = CosineScheduleParams::new(0.0, 0.1, 200.0)?;
    for epoch in [0.0, 50.0, 100.0, 150.0, 200.0] {
        println!("lr at epoch {epoch:>3}: {:.6}", cosine_lr(epoch, &p));
    }
    let y = label_smooth(3, 100, 0.1)?;
    println!(
        "smoothed target: {:.4} on the label, {:.6} elsewhere, sum {}",
        y[3],
        y[0],
        compensated_sum(&y)
    );
    println!(
        "swish(-1, 1) = {:.6}, swish(2, 1) = {:.6}",
        swish(-1.0, 1.0),
        swish(2.0, 1.0)
    );

    let mut beta = BetaSampler::new(1.0, 1.0, 7)?;
    let lambda = beta.sample();
    let other = label_smooth(8, 100, 0.1)?;
    let (_, mixed) = mixup(&[0.0], &y, &[1.0], &other, lambda)?;
    println!(
        "mixup lambda {lambda:.4}: target mass {:.4} / {:.4}",
        mixed[3], mixed[8]
    );

    let img = Image::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0])?;
    let up = nn_upscale(&img, 2)?;
    for r in 0..up.h {
        let row: Vec<f32> = (0..up.w).map(|c| up.at(r, c, 0)).collect();
        println!("{row:?}");
    }
    Ok(())
}
