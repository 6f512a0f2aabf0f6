//! Central-difference checks of every graph operator, the attention gate and
//! the connection-sensitive loss.

#[path = "support/gradcheck_cases.rs"]
mod cases;

use cases::Tally;

fn assert_all(tallies: impl IntoIterator<Item = Tally>) {
    for t in tallies {
        println!("{}", t.summary());
        if let Err(e) = t.verdict() {
            panic!("{e}");
        }
    }
}

#[test]
fn conv2d() {
    assert_all([cases::conv2d()]);
}

#[test]
fn conv_transpose2d() {
    assert_all([cases::conv_transpose2d()]);
}

#[test]
fn max_pool2d() {
    assert_all([cases::max_pool2d()]);
}

#[test]
fn batch_norm_train() {
    assert_all([cases::batch_norm_train()]);
}

#[test]
fn batch_norm_eval() {
    assert_all([cases::batch_norm_eval()]);
}

#[test]
fn elementwise_unary() {
    assert_all(cases::elementwise_unary());
}

#[test]
fn elementwise_binary() {
    assert_all(cases::elementwise_binary());
}

#[test]
fn channel_ops() {
    assert_all(cases::channel_ops());
}

#[test]
fn attention_gate_end_to_end() {
    assert_all(cases::attention_gate());
}

#[test]
fn network_parameters_sampled() {
    assert_all([cases::network_parameters()]);
}

#[test]
fn cs_loss_end_to_end() {
    assert_all([cases::cs_loss_end_to_end()]);
}
