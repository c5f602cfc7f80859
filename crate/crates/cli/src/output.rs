//! Record emission: CSV with 17 significant digits, or JSON lines.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use rnls_core::analysis::SweepRecord;

pub const RECORD_HEADER: [&str; 12] = [
    "omega",
    "Omega",
    "mass",
    "action",
    "energy",
    "mu",
    "lz_expect",
    "n_vortices",
    "iters",
    "converged",
    "residual",
    "init_used",
];

/// Shortest scientific form carrying 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One CSV row: a fixed header plus the cell strings of each record.
pub trait CsvRow {
    fn header() -> Vec<&'static str>;
    fn cells(&self) -> Vec<String>;
}

impl CsvRow for SweepRecord {
    fn header() -> Vec<&'static str> {
        RECORD_HEADER.to_vec()
    }

    fn cells(&self) -> Vec<String> {
        vec![
            fmt_f64(self.omega),
            fmt_f64(self.rotation),
            fmt_f64(self.mass),
            fmt_f64(self.action),
            fmt_f64(self.energy),
            fmt_f64(self.mu),
            fmt_f64(self.lz_expect),
            self.n_vortices.to_string(),
            self.iters.to_string(),
            self.converged.to_string(),
            fmt_f64(self.residual),
            self.init_used.clone(),
        ]
    }
}

pub fn write_csv<R: CsvRow>(rows: &[R], w: impl Write) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(R::header())?;
    for r in rows {
        out.write_record(r.cells())?;
    }
    out.flush()
}

pub fn write_json_lines<R: Serialize>(rows: &[R], mut w: impl Write) -> io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn csv_file<R: CsvRow>(rows: &[R], path: &Path) -> io::Result<()> {
    write_csv(rows, BufWriter::new(File::create(path)?))
}

pub fn json_lines_file<R: Serialize>(rows: &[R], path: &Path) -> io::Result<()> {
    write_json_lines(rows, BufWriter::new(File::create(path)?))
}

/// Exclusive ownership of an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

pub const LOCK_NAME: &str = ".rnls.lock";

impl DirLock {
    pub fn acquire(dir: &Path) -> io::Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == io::ErrorKind::AlreadyExists {
                    io::Error::new(
                        e.kind(),
                        format!(
                            "output directory {} is locked by another run ({} exists)",
                            dir.display(),
                            path.display()
                        ),
                    )
                } else {
                    e
                }
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(omega: f64) -> SweepRecord {
        SweepRecord {
            omega,
            rotation: 0.5,
            mass: 1.0 / 3.0,
            action: -0.1,
            energy: -0.1 - omega / 3.0,
            mu: -omega,
            lz_expect: 0.0,
            n_vortices: 0,
            iters: 12,
            converged: true,
            residual: 1e-9,
            init_used: "multistart[gaussian, vortex(m=1)]".into(),
        }
    }

    #[test]
    fn empty_list_gives_header_only() {
        let mut buf = Vec::new();
        write_csv::<SweepRecord>(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "omega,Omega,mass,action,energy,mu,lz_expect,n_vortices,iters,converged,residual,init_used\n"
        );
    }

    #[test]
    fn floats_round_trip_through_csv() {
        let mut buf = Vec::new();
        write_csv(&[record(-2.0)], &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let row = rd.records().next().unwrap().unwrap();
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(&row[2], "3.3333333333333331e-1");
        assert_eq!(&row[11], "multistart[gaussian, vortex(m=1)]");
    }

    #[test]
    fn json_lines_round_trip() {
        let rows = vec![record(-2.0), record(-3.5)];
        let mut buf = Vec::new();
        write_json_lines(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back: Vec<SweepRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, rows);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["Omega"], 0.5);
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        let e = DirLock::acquire(dir.path()).err().unwrap();
        assert!(e.to_string().contains("locked"));
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
