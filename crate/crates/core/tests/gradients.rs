mod common;

use common::gradcheck::{self, Suite};

macro_rules! group {
    ($name:ident) => {
        #[test]
        fn $name() {
            let mut suite = Suite::default();
            gradcheck::$name(&mut suite);
            assert!(!suite.results.is_empty());
            let failures = suite.failures();
            assert!(failures.is_empty(), "{failures:#?}");
        }
    };
}

group!(elementwise_binary);
group!(elementwise_unary);
group!(reductions_and_reshapes);
group!(linear_algebra);
group!(spatial);
group!(adversarial_losses);
group!(reconstruction);
group!(identity);
group!(triplet);
group!(combined_objective);
