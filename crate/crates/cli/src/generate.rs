//! `refml generate` — materialize synthetic conditions as window CSV files.

use refml_core::config::{DataSource, ExperimentConfig};
use refml_core::data::{export_csv, generate_synthetic};
use refml_core::{Error, Result};

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let synth = match &cfg.data {
        DataSource::Synthetic(s) => s,
        DataSource::CsvDir(_) => {
            return Err(Error::InvalidConfig(
                "generate needs data.source = synthetic".into(),
            ))
        }
    };
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let datasets = generate_synthetic(synth)?;
    for ds in &datasets {
        let path = cfg.out_dir.join(format!("condition_{:02}.csv", ds.condition_id));
        export_csv(ds, &path)?;
        println!("{} ({} windows)", path.display(), ds.windows.len());
    }
    Ok(())
}
