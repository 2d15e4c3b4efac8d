//! Concordance correlation coefficient, the `1 - CCC` training loss and a
//! report over a set of labeled items.
//!
//! cargo run --example ccc_metrics

use capnet::metrics::{ccc, ccc_loss_and_grad, evaluate, render_table, ConstantPredictor, LabelOracle, ReportRow};
use capnet::neural::Tensor;
use capnet::AffectState;

fn main() -> capnet::Result<()> {
    let s = ccc(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0])?;
    println!(
        "ccc = {:.6} (means {:.3}/{:.3}, variances {:.3}/{:.3}, pearson {:.3})",
        s.ccc,
        s.mean_pred,
        s.mean_label,
        s.var_pred,
        s.var_label,
        s.pearson()
    );
    // A shifted copy is perfectly correlated but not concordant.
    let label = [0.1, -0.4, 0.7, 0.2];
    let shifted: Vec<f64> = label.iter().map(|x| x + 0.5).collect();
    println!("shifted copy: ccc {:.3}, pearson {:.3}", ccc(&shifted, &label)?.ccc, ccc(&shifted, &label)?.pearson());

    let preds = Tensor::new(vec![4, 2], vec![0.1, 0.0, 0.3, -0.2, -0.1, 0.4, 0.0, 0.1])?;
    let labels = Tensor::new(vec![4, 2], vec![0.2, 0.1, 0.5, -0.3, -0.2, 0.6, 0.1, 0.0])?;
    let (loss, grad) = ccc_loss_and_grad(&preds, &labels)?;
    println!("batch loss {loss:.4}, d loss / d pred[0] = {:?}", grad.row(0));

    let items: Vec<AffectState> = (0..50)
        .map(|i| {
            let x = (i as f64 * 0.37).sin();
            AffectState::clamped(x, 0.5 * x)
        })
        .collect();
    let rows = [
        ReportRow {
            model: "oracle".into(),
            window_seconds: Some("3".into()),
            report: evaluate(&mut LabelOracle, items.iter(), 16)?,
        },
        ReportRow {
            model: "constant".into(),
            window_seconds: None,
            report: evaluate(&mut ConstantPredictor(AffectState::clamped(0.0, 0.0)), items.iter(), 16)?,
        },
    ];
    print!("{}", render_table(&rows));
    Ok(())
}
