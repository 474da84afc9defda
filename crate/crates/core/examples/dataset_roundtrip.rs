//! Generates a small synthetic dataset, writes it as WFR1, reads it back
//! and shows what corruption looks like to the loader.

use weatherformer::cli::bundle_summary;
use weatherformer::data::{from_wfr_bytes, generate, load_wfr, save_wfr, to_wfr_bytes, GenConfig};

fn main() -> weatherformer::Result<()> {
    let cfg = GenConfig {
        height: 8,
        width: 16,
        steps: 120,
        seed: 11,
        ..GenConfig::default()
    };
    let bundle = generate(&cfg)?;
    print!("{}", bundle_summary(&bundle));

    let path = std::env::temp_dir().join(format!("weatherformer-example-{}.wfr", std::process::id()));
    save_wfr(&bundle, &path)?;
    let bytes = std::fs::read(&path)?;
    let back = load_wfr(&path)?;
    std::fs::remove_file(&path)?;
    println!("{} bytes on disk, reload identical: {}", bytes.len(), to_wfr_bytes(&back)? == bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("corrupt magic -> {}", from_wfr_bytes(&bad).unwrap_err());
    println!("truncated     -> {}", from_wfr_bytes(&bytes[..bytes.len() - 9]).unwrap_err());
    let mut flipped = bytes;
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    println!("flipped bit   -> {}", from_wfr_bytes(&flipped).unwrap_err());
    Ok(())
}
