use std::fs;
use std::path::{Path, PathBuf};

use super::{HarnessError, MetricsBundle};

pub const CLIENT_LOSS_HEADER: &str = "client_id,round,epoch,loss";
pub const SERVER_LOSS_HEADER: &str = "server_id,round,eval_loss";
pub const DELIVERY_HEADER: &str = "client_id,round,delivered_to";

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub client_loss: PathBuf,
    pub server_loss: PathBuf,
    pub delivery: PathBuf,
    pub config: PathBuf,
}

fn write_csv(path: &Path, header: &str, rows: Vec<Vec<String>>) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| HarnessError::Io(e.into()))?;
    let io = |e: csv::Error| HarnessError::Io(e.into());
    w.write_record(header.split(',')).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `client_loss.csv`, `server_loss.csv`, `delivery.csv` and
/// `config.json` into `dir`. Floats use the shortest representation that
/// parses back to the same value.
pub fn export(bundle: &MetricsBundle, dir: &Path) -> Result<ExportPaths, HarnessError> {
    fs::create_dir_all(dir)?;
    let paths = ExportPaths {
        client_loss: dir.join("client_loss.csv"),
        server_loss: dir.join("server_loss.csv"),
        delivery: dir.join("delivery.csv"),
        config: dir.join("config.json"),
    };

    let mut client_rows = Vec::new();
    let mut delivery_rows = Vec::new();
    for c in &bundle.clients {
        for r in &c.rounds {
            if let Some(t) = &r.train {
                for (e, loss) in t.loss_per_epoch.iter().enumerate() {
                    client_rows.push(vec![
                        c.id.clone(),
                        r.round.to_string(),
                        (e + 1).to_string(),
                        loss.to_string(),
                    ]);
                }
            }
            delivery_rows.push(vec![
                c.id.clone(),
                r.round.to_string(),
                r.delivered_to.clone().unwrap_or_else(|| "FAILED".into()),
            ]);
        }
    }
    let server_rows = bundle
        .servers
        .iter()
        .flat_map(|s| {
            s.records
                .iter()
                .map(|r| vec![s.id.clone(), r.round.to_string(), r.eval_loss.to_string()])
        })
        .collect();

    write_csv(&paths.client_loss, CLIENT_LOSS_HEADER, client_rows)?;
    write_csv(&paths.server_loss, SERVER_LOSS_HEADER, server_rows)?;
    write_csv(&paths.delivery, DELIVERY_HEADER, delivery_rows)?;
    fs::write(&paths.config, bundle.config.to_json() + "\n")?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bundle_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = export(&MetricsBundle::default(), dir.path()).unwrap();
        assert_eq!(fs::read_to_string(&p.client_loss).unwrap(), "client_id,round,epoch,loss\n");
        assert_eq!(fs::read_to_string(&p.server_loss).unwrap(), "server_id,round,eval_loss\n");
        assert_eq!(fs::read_to_string(&p.delivery).unwrap(), "client_id,round,delivered_to\n");
        let cfg = fs::read_to_string(&p.config).unwrap();
        assert!(crate::harness::ExperimentConfig::from_json(&cfg).is_ok());
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        fs::write(&file, "x").unwrap();
        assert!(matches!(export(&MetricsBundle::default(), &file.join("sub")), Err(HarnessError::Io(_))));
    }
}
