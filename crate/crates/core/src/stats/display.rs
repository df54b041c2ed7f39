/// Byte rendering of one feature map: subtract the mean, divide by the
/// population standard deviation (skipped when it is below `1e-12`), scale
/// by 32, shift by 64, clip to `[0, 255]` and truncate to `u8`.
pub fn normalize_for_display(map: &[f32]) -> Vec<u8> {
    if map.is_empty() {
        return Vec::new();
    }
    let n = map.len() as f64;
    let mut sum = 0f64;
    for &v in map {
        sum += v as f64;
    }
    let mean = sum / n;
    let mut ss = 0f64;
    for &v in map {
        let d = v as f64 - mean;
        ss += d * d;
    }
    let std = (ss / n).sqrt();
    map.iter()
        .map(|&v| {
            let mut x = v as f64 - mean;
            if std >= 1e-12 {
                x /= std;
            }
            (x * 32.0 + 64.0).clamp(0.0, 255.0) as u8
        })
        .collect()
}
