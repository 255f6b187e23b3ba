//! Finite-difference sweep over primitives and composed losses.

fn main() -> fqrcnn::Result<()> {
    let t = std::time::Instant::now();
    let reports = fqrcnn::gradcheck::full_suite(20)?;
    for r in &reports {
        println!("{:<24} {:.3e}", r.name, r.max_error);
    }
    let worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
    println!("worst {worst:.3e} (limit {:e}) in {:.1}s", fqrcnn::gradcheck::TOLERANCE, t.elapsed().as_secs_f64());
    Ok(())
}
