//! Parameter and FLOP totals of the full-size fixtures against published figures.

use rlprune::zoo;

pub struct Check {
    pub what: &'static str,
    pub got: u64,
    pub want: f64,
    pub tol: f64,
}

impl Check {
    pub fn rel_error(&self) -> f64 {
        (self.got as f64 - self.want).abs() / self.want
    }

    pub fn ok(&self) -> bool {
        self.rel_error() <= self.tol
    }
}

pub fn checks() -> Vec<Check> {
    let vgg = zoo::vgg19(100, 0);
    let res = zoo::resnet56(10, 0);
    vec![
        Check {
            what: "vgg19 params",
            got: vgg.count_params().unwrap().total,
            want: 39.33e6,
            tol: 0.02,
        },
        Check {
            what: "vgg19 flops",
            got: vgg.count_flops().unwrap().total,
            want: 418.63e6,
            tol: 0.02,
        },
        Check {
            what: "resnet56 params",
            got: res.count_params().unwrap().total,
            want: 0.86e6,
            tol: 0.03,
        },
        Check {
            what: "resnet56 flops",
            got: res.count_flops().unwrap().total,
            want: 127.93e6,
            tol: 0.03,
        },
    ]
}
