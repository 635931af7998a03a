//! CSV and JSON artifacts.
//!
//! CSV files use `,` separators, `\n` line endings and 17 significant digits
//! for floating-point values, so every number reads back to the same bits.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::limits::{FluidSolution, OuMoments};
use crate::simulate::TrajectoryBundle;
use crate::verify::VerificationReport;

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a header and rows; an empty row set gives a header-only file.
pub fn write_csv<W: Write>(mut w: W, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> io::Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()
}

fn create(path: &Path) -> io::Result<io::BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(io::BufWriter::new(fs::File::create(path)?))
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |k| format!("{prefix}_{k}"))
}

pub fn fluid_header(queues: usize) -> Vec<String> {
    std::iter::once("t".to_string()).chain(numbered("rho", queues)).collect()
}

pub fn write_fluid_csv<W: Write>(w: W, fluid: &FluidSolution) -> io::Result<()> {
    let queues = fluid.rho.first().map_or(0, |r| r.len());
    let rows = fluid
        .grid
        .iter()
        .zip(&fluid.rho)
        .map(|(t, r)| std::iter::once(fmt_f64(*t)).chain(r.iter().map(|x| fmt_f64(*x))).collect());
    write_csv(w, &fluid_header(queues), rows)
}

pub fn moments_header(queues: usize) -> Vec<String> {
    let mut h: Vec<String> = std::iter::once("t".to_string()).chain(numbered("m", queues)).collect();
    for k in 1..=queues {
        for l in k..=queues {
            // Indices are separated only when they could run together.
            h.push(if queues < 10 { format!("V_{k}{l}") } else { format!("V_{k}_{l}") });
        }
    }
    h
}

pub fn write_moments_csv<W: Write>(w: W, moments: &OuMoments) -> io::Result<()> {
    let queues = moments.mean_m.first().map_or(0, |m| m.len());
    let rows = moments.grid.iter().zip(&moments.mean_m).zip(&moments.cov_v).map(|((t, m), v)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(m.iter().map(|x| fmt_f64(*x)));
        for k in 0..queues {
            for l in k..queues {
                row.push(fmt_f64(v[(k, l)]));
            }
        }
        row
    });
    write_csv(w, &moments_header(queues), rows)
}

pub fn trajectory_header(queues: usize) -> Vec<String> {
    ["t", "j_state"].iter().map(|s| s.to_string()).chain(numbered("q", queues)).collect()
}

/// Trajectory at the output epochs; `j_state` is 1-based.
pub fn write_trajectory_csv<W: Write>(w: W, bundle: &TrajectoryBundle) -> io::Result<()> {
    let queues = bundle.initial.len();
    let rows = bundle.snapshots.iter().map(|s| {
        let mut row = vec![fmt_f64(s.t), (s.state + 1).to_string()];
        row.extend(s.queues.iter().map(u64::to_string));
        row
    });
    write_csv(w, &trajectory_header(queues), rows)
}

pub fn trajectory_file_name(rep: usize) -> String {
    format!("trajectory_{rep:04}.csv")
}

/// Writes `path` through `f`, creating parent directories.
pub fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<PathBuf> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}

pub fn write_report_json(path: &Path, report: &VerificationReport) -> io::Result<PathBuf> {
    write_file(path, |w| writeln!(w, "{}", report.to_json()))
}

pub fn write_report_text(path: &Path, report: &VerificationReport) -> io::Result<PathBuf> {
    write_file(path, |w| write!(w, "{}", report.to_table()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, 2.5e-300, -7.0, 0.0, 123456.789] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn empty_grid_gives_header_only() {
        let fluid = FluidSolution {
            grid: vec![],
            rho: vec![],
            step: 0.1,
        };
        let mut buf = Vec::new();
        write_fluid_csv(&mut buf, &fluid).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t\n");
        let mut buf = Vec::new();
        write_csv(&mut buf, &fluid_header(2), Vec::<Vec<String>>::new()).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "t,rho_1,rho_2\n");
    }

    #[test]
    fn fluid_layout() {
        let fluid = FluidSolution {
            grid: vec![0.0, 0.5],
            rho: vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])],
            step: 0.5,
        };
        let mut buf = Vec::new();
        write_fluid_csv(&mut buf, &fluid).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,rho_1,rho_2");
        assert_eq!(lines.len(), 3);
        assert!(!text.contains('\r'));
        assert_eq!(lines[2].split(',').map(|c| c.parse::<f64>().unwrap()).collect::<Vec<_>>(), vec![0.5, 3.0, 4.0]);
    }

    #[test]
    fn moments_layout() {
        assert_eq!(moments_header(2), vec!["t", "m_1", "m_2", "V_11", "V_12", "V_22"]);
        assert_eq!(moments_header(10)[11], "V_1_1");
        assert_eq!(trajectory_header(2), vec!["t", "j_state", "q_1", "q_2"]);
        assert_eq!(trajectory_file_name(7), "trajectory_0007.csv");
    }
}
