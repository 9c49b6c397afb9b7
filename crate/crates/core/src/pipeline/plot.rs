//! Static SVG charts for ROC curves, training curves and bar summaries.

use plotters::prelude::*;

const SIZE: (u32, u32) = (640, 420);

fn colour(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(214, 39, 40),
        RGBColor(44, 160, 44),
        RGBColor(255, 127, 14),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    PALETTE[i % PALETTE.len()]
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart; axis ranges default to the data extent when `None`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_range: Option<(f64, f64)>,
    y_range: Option<(f64, f64)>,
) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let extent = |f: fn(&(f64, f64)) -> f64| {
        padded(
            all().map(f).fold(f64::INFINITY, f64::min),
            all().map(f).fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (x0, x1) = x_range.unwrap_or_else(|| extent(|p| p.0));
    let (y0, y1) = y_range.unwrap_or_else(|| extent(|p| p.1));
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).expect("svg draw");
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1)
            .expect("svg draw");
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().expect("svg draw");
        for (i, s) in series.iter().enumerate() {
            let c = colour(i);
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), c.stroke_width(2)))
                .expect("svg draw")
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
        }
        if series.len() > 1 || series.first().is_some_and(|s| !s.name.is_empty()) {
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerRight)
                .background_style(WHITE.mix(0.85))
                .border_style(BLACK)
                .draw()
                .expect("svg draw");
        }
        root.present().expect("svg draw");
    }
    out
}

/// Grouped bars: one group per category, one bar per series inside it.
/// Missing values leave a gap.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let values = series.iter().flat_map(|(_, v)| v.iter().flatten().copied());
    let lo = values.clone().fold(0.0, f64::min);
    let hi = values.fold(0.0, f64::max);
    let (y0, y1) = if hi - lo < 1e-12 { (lo, lo + 1.0) } else { (lo, hi + 0.05 * (hi - lo)) };
    let n = categories.len().max(1);
    let width = 0.8 / series.len().max(1) as f64;
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, SIZE).into_drawing_area();
        root.fill(&WHITE).expect("svg draw");
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(60)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..n as f64, y0..y1)
            .expect("svg draw");
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n * 2 + 1)
            .x_label_formatter(&|x| {
                let pos = x - x.floor();
                if (pos - 0.5).abs() < 1e-6 {
                    categories.get(x.floor() as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc(y_label)
            .draw()
            .expect("svg draw");
        for (s, (name, vals)) in series.iter().enumerate() {
            let c = colour(s);
            chart
                .draw_series(vals.iter().enumerate().filter_map(|(k, v)| {
                    let left = k as f64 + 0.1 + s as f64 * width;
                    v.map(|v| Rectangle::new([(left, v.min(0.0)), (left + width, v.max(0.0))], c.filled()))
                }))
                .expect("svg draw")
                .label(name.clone())
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperRight)
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .expect("svg draw");
        root.present().expect("svg draw");
    }
    out
}
