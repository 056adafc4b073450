//! Reader for the NNet text format (the ACAS Xu convention): `//` comment
//! header, counts line, layer sizes, a legacy flag line, input minimums and
//! maximums, normalization means and ranges, then each layer's weight rows
//! followed by its bias values, all comma-separated with trailing commas
//! tolerated.
//!
//! Decimal literals are parsed with the standard library's correctly
//! rounded conversion, so every weight is the nearest double to the text —
//! parsing is bit-exact.
//!
//! Normalization is kept out of the network by default: [`read_nnet`]
//! returns the raw weights, which expect pre-normalized inputs, so
//! verification boxes live in the same space as the file's weights.
//! [`read_nnet_folded`] instead folds input normalization into the first
//! affine layer and output denormalization into the last, giving a network
//! that takes raw inputs.  Folding cannot express the format's input
//! clipping, so callers of the folded form must keep boxes inside the
//! declared input range themselves.

use crate::deeppoly::BoxRegion;
use crate::error::{Error, Result};
use crate::net::{Dnn, Layer};
use ndarray::{Array1, Array2};
use std::fs;
use std::path::Path;

/// The parsed file, before conversion to a [`Dnn`].
#[derive(Debug, Clone)]
pub struct NnetFile {
    /// Input size, each hidden size, output size.
    pub layer_sizes: Vec<usize>,
    pub input_mins: Vec<f64>,
    pub input_maxes: Vec<f64>,
    /// One mean per input plus one for the outputs.
    pub means: Vec<f64>,
    /// One range per input plus one for the outputs.
    pub ranges: Vec<f64>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NnetFile {
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// The declared valid input range as a box, in raw input coordinates.
    pub fn input_box(&self) -> Result<BoxRegion> {
        BoxRegion::new(
            Array1::from_vec(self.input_mins.clone()),
            Array1::from_vec(self.input_maxes.clone()),
        )
    }

    /// The network exactly as stored: expects pre-normalized inputs and
    /// produces normalized outputs.
    pub fn to_dnn(&self) -> Result<Dnn> {
        self.build(false)
    }

    /// The network with normalization folded in: the first affine layer
    /// absorbs `(x - mean) / range` and the last absorbs
    /// `y * range_out + mean_out`, so it maps raw inputs to raw outputs.
    pub fn to_dnn_folded(&self) -> Result<Dnn> {
        self.build(true)
    }

    fn build(&self, fold: bool) -> Result<Dnn> {
        let count = self.weights.len();
        let mut layers = Vec::with_capacity(2 * count - 1);
        let input_dim = self.input_dim();
        let mean_out = self.means[input_dim];
        let range_out = self.ranges[input_dim];
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut w = w.clone();
            let mut b = b.clone();
            if fold && k == 0 {
                for j in 0..input_dim {
                    let range = self.ranges[j];
                    let mean = self.means[j];
                    for i in 0..w.nrows() {
                        let scaled = w[(i, j)] / range;
                        b[i] -= scaled * mean;
                        w[(i, j)] = scaled;
                    }
                }
            }
            if fold && k == count - 1 {
                w.mapv_inplace(|v| v * range_out);
                b.mapv_inplace(|v| v * range_out + mean_out);
            }
            let out = w.nrows();
            layers.push(Layer::affine(w, b)?);
            if k + 1 < count {
                layers.push(Layer::relu(out));
            }
        }
        Dnn::new(layers)
    }
}

struct Cursor<'a> {
    path: &'a str,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    /// 1-based number of the last line pulled, for end-of-file messages.
    last_line: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a str, text: &'a str) -> Cursor<'a> {
        Cursor {
            path,
            lines: text.lines().enumerate(),
            last_line: 0,
        }
    }

    fn err(&self, lineno: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.into(),
            location: format!("line {lineno}"),
            message,
        }
    }

    /// Next non-comment, non-blank line, with its 1-based number.
    fn data_line(&mut self, expecting: &str) -> Result<(usize, &'a str)> {
        for (idx, line) in self.lines.by_ref() {
            self.last_line = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with("//") {
                continue;
            }
            return Ok((idx + 1, trimmed));
        }
        Err(Error::Parse {
            path: self.path.into(),
            location: format!("line {}", self.last_line + 1),
            message: format!("file ends before {expecting}"),
        })
    }

    fn floats(&mut self, expecting: &str, expected_len: usize) -> Result<Vec<f64>> {
        let (lineno, line) = self.data_line(expecting)?;
        let values: Vec<f64> = line
            .split(',')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| self.err(lineno, format!("{expecting}: {f:?} is not a number")))
            })
            .collect::<Result<_>>()?;
        if values.len() != expected_len {
            return Err(self.err(
                lineno,
                format!("{expecting}: expected {expected_len} values, found {}", values.len()),
            ));
        }
        Ok(values)
    }

    fn counts(&mut self, expecting: &str) -> Result<(usize, Vec<usize>)> {
        let (lineno, line) = self.data_line(expecting)?;
        let values: Vec<usize> = line
            .split(',')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| self.err(lineno, format!("{expecting}: {f:?} is not a count")))
            })
            .collect::<Result<_>>()?;
        Ok((lineno, values))
    }
}

/// Parses NNet text.  `origin` names the source in error messages.
pub fn parse_nnet(text: &str, origin: &str) -> Result<NnetFile> {
    let mut cursor = Cursor::new(origin, text);

    let (lineno, header) = cursor.counts("header counts")?;
    if header.len() < 4 {
        return Err(cursor.err(
            lineno,
            format!(
                "header must hold layer count, input size, output size, and max layer size; found {} values",
                header.len()
            ),
        ));
    }
    let num_layers = header[0];
    let (input_size, output_size) = (header[1], header[2]);
    if num_layers == 0 || input_size == 0 || output_size == 0 {
        return Err(cursor.err(lineno, "layer count and sizes must be positive".into()));
    }

    let (lineno, layer_sizes) = cursor.counts("layer sizes")?;
    if layer_sizes.len() != num_layers + 1 {
        return Err(cursor.err(
            lineno,
            format!(
                "declared {num_layers} layers need {} sizes, found {}",
                num_layers + 1,
                layer_sizes.len()
            ),
        ));
    }
    if layer_sizes[0] != input_size || layer_sizes[num_layers] != output_size {
        return Err(cursor.err(
            lineno,
            format!(
                "layer sizes {}..{} disagree with the declared input size {input_size} and output size {output_size}",
                layer_sizes[0], layer_sizes[num_layers]
            ),
        ));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(cursor.err(lineno, "every layer size must be positive".into()));
    }

    // Legacy symmetric flag: present, ignored.
    cursor.data_line("the symmetric flag")?;

    let input_mins = cursor.floats("input minimums", input_size)?;
    let input_maxes = cursor.floats("input maximums", input_size)?;
    let means = cursor.floats("normalization means", input_size + 1)?;
    let ranges = cursor.floats("normalization ranges", input_size + 1)?;
    if ranges.iter().any(|&r| r == 0.0 || !r.is_finite()) {
        return Err(Error::Parse {
            path: origin.into(),
            location: "normalization ranges".into(),
            message: "every range must be finite and nonzero".into(),
        });
    }

    let mut weights = Vec::with_capacity(num_layers);
    let mut biases = Vec::with_capacity(num_layers);
    for layer in 0..num_layers {
        let (n_in, n_out) = (layer_sizes[layer], layer_sizes[layer + 1]);
        let mut w = Array2::zeros((n_out, n_in));
        for row in 0..n_out {
            let values = cursor.floats(
                &format!("weight row {row} of layer {layer}"),
                n_in,
            )?;
            for (col, v) in values.into_iter().enumerate() {
                w[(row, col)] = v;
            }
        }
        let mut b = Array1::zeros(n_out);
        for row in 0..n_out {
            let values = cursor.floats(&format!("bias {row} of layer {layer}"), 1)?;
            b[row] = values[0];
        }
        weights.push(w);
        biases.push(b);
    }

    Ok(NnetFile {
        layer_sizes,
        input_mins,
        input_maxes,
        means,
        ranges,
        weights,
        biases,
    })
}

/// Reads an NNet file as stored: raw weights, pre-normalized inputs.
pub fn read_nnet(path: impl AsRef<Path>) -> Result<Dnn> {
    let file = read_nnet_file(path)?;
    file.to_dnn()
}

/// Reads an NNet file with normalization folded in: raw inputs and outputs.
pub fn read_nnet_folded(path: impl AsRef<Path>) -> Result<Dnn> {
    let file = read_nnet_file(path)?;
    file.to_dnn_folded()
}

/// Reads and parses an NNet file without converting it.
pub fn read_nnet_file(path: impl AsRef<Path>) -> Result<NnetFile> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {shown}"), e))?;
    parse_nnet(&text, &shown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Network;

    const TOY: &str = "\
// a hand-written two-layer network
// with a second comment line
2,2,2,2,
2,2,2,
0,
-1.0,-1.0,
1.0,1.0,
0.0,0.0,0.0,
1.0,1.0,1.0,
0.8,1.1,
1.4,1.2,
0.0,
0.0,
-0.8,0.4,
1.1,-1.1,
0.25,
-0.5,
";

    #[test]
    fn toy_file_parses_to_expected_weights() {
        let file = parse_nnet(TOY, "<memory>").unwrap();
        assert_eq!(file.layer_sizes, vec![2, 2, 2]);
        assert_eq!(file.weights[0][(0, 0)], 0.8);
        assert_eq!(file.weights[0][(1, 1)], 1.2);
        assert_eq!(file.weights[1][(1, 0)], 1.1);
        assert_eq!(file.biases[1][0], 0.25);
        assert_eq!(file.biases[1][1], -0.5);
        let net = file.to_dnn().unwrap();
        assert_eq!(net.layers().len(), 3, "affine, relu, affine");
        assert!(net.layers()[0].is_affine());
        assert!(!net.layers()[1].is_affine());
        let out = net.forward(&[1.0, 0.0]).unwrap();
        // Hidden (0.8, 1.4) -> outputs (-0.8*0.8 + 0.4*1.4 + 0.25,
        //                               1.1*0.8 - 1.1*1.4 - 0.5).
        assert!((out[0] - 0.17).abs() < 1e-12);
        assert!((out[1] + 1.16).abs() < 1e-12);
    }

    #[test]
    fn parsing_decimal_literals_is_correctly_rounded() {
        let file = parse_nnet(TOY, "<memory>").unwrap();
        assert_eq!(file.weights[0][(0, 0)], "0.8".parse::<f64>().unwrap());
        // A 17-digit literal survives exactly.
        let text = TOY.replace("0.8,1.1,", "0.12345678901234567,1.1,");
        let file = parse_nnet(&text, "<memory>").unwrap();
        assert_eq!(file.weights[0][(0, 0)], 0.123_456_789_012_345_67_f64);
    }

    #[test]
    fn truncated_weights_report_the_line() {
        let cut = TOY.lines().take(10).collect::<Vec<_>>().join("\n");
        let err = parse_nnet(&cut, "<memory>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 11"), "{msg}");
        assert!(msg.contains("weight row 1 of layer 0"), "{msg}");
    }

    #[test]
    fn truncated_biases_report_the_line() {
        let cut = TOY.lines().take(15).collect::<Vec<_>>().join("\n");
        let err = parse_nnet(&cut, "<memory>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bias 0 of layer 1"), "{msg}");
    }

    #[test]
    fn declared_layer_count_must_match_sizes_line() {
        let bad = TOY.replace("2,2,2,\n0,", "2,2,\n0,");
        let err = parse_nnet(&bad, "<memory>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("need 3 sizes, found 2"), "{msg}");
    }

    #[test]
    fn short_rows_are_rejected_with_counts() {
        let bad = TOY.replace("0.8,1.1,", "0.8,");
        let err = parse_nnet(&bad, "<memory>").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 2 values, found 1"), "{msg}");
    }

    #[test]
    fn bad_float_is_rejected_with_text() {
        let bad = TOY.replace("1.4,1.2,", "1.4,oops,");
        let err = parse_nnet(&bad, "<memory>").unwrap_err();
        assert!(err.to_string().contains("\"oops\""), "{err}");
    }

    #[test]
    fn input_box_comes_from_min_max_lines() {
        let file = parse_nnet(TOY, "<memory>").unwrap();
        let region = file.input_box().unwrap();
        assert_eq!(region.lower().to_vec(), vec![-1.0, -1.0]);
        assert_eq!(region.upper().to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn folding_matches_manual_normalization() {
        // Nontrivial means and ranges on both inputs and the output.
        let text = TOY
            .replace("0.0,0.0,0.0,", "0.5,-0.25,1.5,")
            .replace("1.0,1.0,1.0,", "2.0,4.0,3.0,");
        let file = parse_nnet(&text, "<memory>").unwrap();
        let raw = file.to_dnn().unwrap();
        let folded = file.to_dnn_folded().unwrap();
        for x in [[0.3, -0.8], [1.0, 1.0], [-0.95, 0.2], [0.0, 0.0]] {
            let normalized = [(x[0] - 0.5) / 2.0, (x[1] + 0.25) / 4.0];
            let y = raw.forward(&normalized).unwrap();
            let denorm: Vec<f64> = y.iter().map(|v| v * 3.0 + 1.5).collect();
            let direct = folded.forward(&x).unwrap();
            for (a, b) in direct.iter().zip(&denorm) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_range_is_rejected() {
        let bad = TOY.replace("1.0,1.0,1.0,", "1.0,0.0,1.0,");
        let err = parse_nnet(&bad, "<memory>").unwrap_err();
        assert!(err.to_string().contains("nonzero"), "{err}");
    }
}
