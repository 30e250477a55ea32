//! Log-SNR CSV export: a `#`-prefixed header carrying the schedule recipe
//! (including `s=...`), then `t,log_snr` rows. The zero-SNR terminal row is
//! emitted as `-inf`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ti2v_core::schedule::NoiseSchedule;

use crate::error::Result;

pub fn render(sched: &NoiseSchedule) -> String {
    let mut out = format!("# {}\nt,log_snr\n", sched.header());
    for (t, log_snr) in sched.logsnr_rows() {
        out.push_str(&format!("{t},{log_snr}\n"));
    }
    out
}

pub fn export_logsnr_csv(sched: &NoiseSchedule, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::File::create(path)?.write_all(render(sched).as_bytes())?;
    Ok(())
}
