//! Per-epoch training metrics and their CSV serialization.
//!
//! Schema: `epoch,split,loss,accuracy` followed by two columns per
//! weight-quantized layer, `layer_<i>_threshold` and `layer_<i>_prune_ratio`,
//! where `<i>` is the layer's index in the network. Floats are written with
//! Rust's shortest round-trip formatting, so identical runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use crate::layers::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerMetric {
    /// Index of the layer in the network.
    pub index: usize,
    /// Weight clipping threshold ασ at the time of measurement.
    pub threshold: f64,
    /// Fraction of weights quantizing to exactly zero.
    pub prune_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub layers: Vec<LayerMetric>,
}

impl MetricsRecord {
    /// Snapshots the weight-quantizer thresholds and pruning ratios of every
    /// weight-quantized layer in `net`.
    pub fn collect(net: &Network, epoch: usize, split: Split, loss: f64, accuracy: f64) -> MetricsRecord {
        let layers = net
            .layers
            .iter()
            .enumerate()
            .filter_map(|(index, layer)| {
                let st = layer.weight_quant.as_ref()?;
                Some(LayerMetric {
                    index,
                    threshold: st.threshold(),
                    prune_ratio: layer.weight_prune_ratio().expect("quantizer present"),
                })
            })
            .collect();
        MetricsRecord { epoch, split, loss, accuracy, layers }
    }
}

pub fn csv_header(layer_indices: &[usize]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy");
    for i in layer_indices {
        write!(s, ",layer_{i}_threshold,layer_{i}_prune_ratio").unwrap();
    }
    s.push('\n');
    s
}

pub fn csv_row(rec: &MetricsRecord) -> String {
    let mut s = format!("{},{},{},{}", rec.epoch, rec.split.as_str(), rec.loss, rec.accuracy);
    for lm in &rec.layers {
        write!(s, ",{},{}", lm.threshold, lm.prune_ratio).unwrap();
    }
    s.push('\n');
    s
}

/// Serializes a full history; all records must cover the same layer set.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let indices: Vec<usize> = records
        .first()
        .map(|r| r.layers.iter().map(|l| l.index).collect())
        .unwrap_or_default();
    let mut out = csv_header(&indices);
    for rec in records {
        debug_assert!(rec.layers.iter().map(|l| l.index).eq(indices.iter().copied()));
        out.push_str(&csv_row(rec));
    }
    out
}

pub fn write_csv(path: &Path, records: &[MetricsRecord]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_csv(records).as_bytes())
}

/// Parses a metrics CSV produced by [`to_csv`]. Layer indices are recovered
/// from the header.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty metrics file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..4] != ["epoch", "split", "loss", "accuracy"] {
        return Err(format!("unexpected header: {header}"));
    }
    let mut indices = Vec::new();
    let mut c = 4;
    while c < cols.len() {
        let idx = cols[c]
            .strip_prefix("layer_")
            .and_then(|s| s.strip_suffix("_threshold"))
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| format!("bad threshold column: {}", cols[c]))?;
        let ratio_col = format!("layer_{idx}_prune_ratio");
        if cols.get(c + 1) != Some(&ratio_col.as_str()) {
            return Err(format!("missing column {ratio_col}"));
        }
        indices.push(idx);
        c += 2;
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(format!("line {}: expected {} fields, got {}", lineno + 2, cols.len(), fields.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", lineno + 2));
        let mut layers = Vec::new();
        for (slot, &idx) in indices.iter().enumerate() {
            layers.push(LayerMetric {
                index: idx,
                threshold: num(fields[4 + 2 * slot])?,
                prune_ratio: num(fields[5 + 2 * slot])?,
            });
        }
        records.push(MetricsRecord {
            epoch: fields[0].parse().map_err(|e| format!("line {}: {e}", lineno + 2))?,
            split: Split::parse(fields[1]).ok_or_else(|| format!("line {}: bad split {}", lineno + 2, fields[1]))?,
            loss: num(fields[2])?,
            accuracy: num(fields[3])?,
            layers,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                epoch: 0,
                split: Split::Train,
                loss: 2.302585,
                accuracy: 0.1125,
                layers: vec![
                    LayerMetric { index: 1, threshold: 0.75, prune_ratio: 0.40625 },
                    LayerMetric { index: 2, threshold: 1.5, prune_ratio: 0.25 },
                ],
            },
            MetricsRecord {
                epoch: 0,
                split: Split::Val,
                loss: 2.1,
                accuracy: 0.2,
                layers: vec![
                    LayerMetric { index: 1, threshold: 0.75, prune_ratio: 0.40625 },
                    LayerMetric { index: 2, threshold: 1.5, prune_ratio: 0.25 },
                ],
            },
        ]
    }

    #[test]
    fn header_names_layer_columns() {
        assert_eq!(
            csv_header(&[1, 2]),
            "epoch,split,loss,accuracy,layer_1_threshold,layer_1_prune_ratio,layer_2_threshold,layer_2_prune_ratio\n"
        );
    }

    #[test]
    fn round_trips_through_text() {
        let records = sample();
        let text = to_csv(&records);
        let back = parse_csv(&text).unwrap();
        assert_eq!(records, back);
        // And the re-serialization is byte-identical.
        assert_eq!(to_csv(&back), text);
    }

    #[test]
    fn serialization_is_deterministic() {
        assert_eq!(to_csv(&sample()), to_csv(&sample()));
    }

    #[test]
    fn rejects_malformed_rows() {
        let text = to_csv(&sample());
        let truncated = text.replace(",0.25\n", "\n");
        assert!(parse_csv(&truncated).is_err());
        assert!(parse_csv("nonsense\n").is_err());
    }

    #[test]
    fn collect_reads_quantized_layers_only() {
        use crate::layers::{LayerPlan, Network, QuantizedLayer};
        use crate::ops::ConvGeom;
        use crate::quant::QuantMode;
        use crate::rng::Rng;

        let mut rng = Rng::new(4);
        let geom = ConvGeom { stride: 2, pad: 1 };
        let layers = vec![
            QuantizedLayer::conv2d(1, 2, 3, geom, &LayerPlan::off(), true, true, &mut rng).unwrap(),
            QuantizedLayer::conv2d(2, 2, 3, geom, &LayerPlan::full(3, QuantMode::Uniform), false, true, &mut rng)
                .unwrap(),
            QuantizedLayer::linear(2 * 2 * 2, 3, &LayerPlan::input_only(3), false, true, false, &mut rng)
                .unwrap(),
        ];
        let mut net = Network::new(layers, vec![1, 8, 8], 3);
        net.layers[1].weight_quant.as_mut().unwrap().sigma = 0.25;
        let rec = MetricsRecord::collect(&net, 3, Split::Test, 0.5, 0.9);
        assert_eq!(rec.layers.len(), 1);
        assert_eq!(rec.layers[0].index, 1);
        assert_eq!(rec.layers[0].threshold, 3.0 * 0.25);
    }
}
