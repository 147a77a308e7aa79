//! Feature-space metrics on the fixed random feature net: the LPIPS-style
//! distance, the structure distance, and FID.

use turbo_i2i::data::{gen_two_domain_dataset, SceneSpec};
use turbo_i2i::perceptual::{
    dino_struct_dist, fid, frechet_distance, lpips_like, FeatureNet, FeatureStats,
};

fn main() -> turbo_i2i::Result<()> {
    let net = FeatureNet::new(7);
    let ds = gen_two_domain_dataset(40, &SceneSpec::default())?;

    let (x, y) = (&ds.x[0], &ds.y[ds.paired[0]]);
    println!("lpips_like(x, x)       = {:.4}", lpips_like(&net, x, x)?);
    println!("lpips_like(day, night) = {:.4}", lpips_like(&net, x, y)?);
    // Same geometry, different appearance: small structure distance.
    println!(
        "dino_struct same scene  x100 = {:.3}",
        100.0 * dino_struct_dist(&net, x, y)?
    );
    println!(
        "dino_struct other scene x100 = {:.3}",
        100.0 * dino_struct_dist(&net, x, &ds.y[5])?
    );

    let (a, b) = ds.x.split_at(20);
    println!("FID day vs day     = {:.4}", fid(a, b, &net)?);
    println!("FID day vs night   = {:.4}", fid(a, &ds.y[..20], &net)?);

    // Closed forms.
    let st = |mean: Vec<f64>, cov: Vec<f64>| FeatureStats {
        mean,
        cov,
        count: 2,
    };
    let shift = frechet_distance(
        &st(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
        &st(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]),
    )?;
    let scale = frechet_distance(&st(vec![0.0], vec![1.0]), &st(vec![0.0], vec![4.0]))?;
    println!("unit mean shift -> {shift:.6}, variance 1 vs 4 -> {scale:.6}");
    Ok(())
}
