//! Throwaway calibration harness; deleted before release.

use bsr_core::train::{make_synthetic, SynthSpec};

#[test]
#[ignore]
fn sign_balance() {
    let mut spec = SynthSpec::toy_transfer(4);
    spec.noise = 0.0;
    spec.nuisance = 0.0;
    let data = make_synthetic(&spec, 400, 9).unwrap();
    let grid = spec.grid;
    let size = spec.image_size;
    let cell_mean = move |img: &bsr_core::tensor::Tensor, cell: usize| {
        let side = size / grid;
        let (cr, cc) = (cell / grid, cell % grid);
        let mut sum = 0.0;
        for r in cr * side..(cr + 1) * side {
            for c in cc * side..(cc + 1) * side {
                sum += img.data()[r * size + c];
            }
        }
        sum / (side * side) as f64
    };
    let mut plus = [0usize; 4];
    let mut count = [0usize; 4];
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let p = cell_mean(img, spec.primary_cell(label));
        if p > 0.0 {
            plus[label] += 1;
        }
        count[label] += 1;
    }
    eprintln!("plus fraction per class: {:?}",
        (0..4).map(|c| plus[c] as f64 / count[c] as f64).collect::<Vec<_>>());
    for i in 0..12 {
        let p = cell_mean(&data.images[i], spec.primary_cell(data.labels[i]));
        eprintln!("image {i} label {} primary mean {p:.3}", data.labels[i]);
    }
}
