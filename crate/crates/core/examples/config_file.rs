//! Parse a configuration file with flag-style overrides and show how errors
//! name the offending key and line.

use avtrack::config::Config;

fn main() -> avtrack::Result<()> {
    let text = "# paper-scale run\nprofile = paper\nsteps = 1200\nbeta = 0.7\n";
    let overrides = vec![("steps".to_string(), "50".to_string())];
    let cfg = Config::parse(text, &overrides)?;
    println!("dim {}, depth {}, steps {}, beta {}", cfg.model.backbone.dim, cfg.model.backbone.depth, cfg.steps, cfg.model.backbone.beta);
    for bad in ["beta = 1.5\n", "depht = 4\n", "lr = fast\n"] {
        println!("{:>12} -> {}", bad.trim(), Config::parse(bad, &[]).unwrap_err());
    }
    print!("{}", Config::parse("", &[])?.to_text().lines().take(6).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
