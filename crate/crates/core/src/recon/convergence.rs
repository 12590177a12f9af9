use super::train::TrainLog;

/// First logged epoch `e` such that the values recorded in
/// `[e, e + window)` vary by at most `tol`. The window must be covered by
/// the log: records have to extend to at least `e + window - 1`.
pub fn convergence_epoch_of(series: &[(usize, f64)], window: usize, tol: f64) -> Option<usize> {
    let last = series.last()?.0;
    for (i, &(e, _)) in series.iter().enumerate() {
        if e + window.max(1) - 1 > last {
            break;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(_, v) in series[i..].iter().take_while(|(f, _)| *f < e + window) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo <= tol {
            return Some(e);
        }
    }
    None
}

/// Convergence of the PSNR trajectory: variation within `tol` dB over
/// `window` consecutive epochs.
pub fn convergence_epoch(log: &TrainLog, window: usize, tol: f64) -> Option<usize> {
    convergence_epoch_of(&log.psnr_series(), window, tol)
}
