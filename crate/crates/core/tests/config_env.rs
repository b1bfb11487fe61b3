// Alone in its own binary: it mutates the process environment.

use qkern::runtime::{RuntimeConfig, FORCE_PORTABLE_ENV};

#[test]
fn environment_forces_portable_kernels() {
    let cfg = RuntimeConfig::from_toml_str("").unwrap();
    for (value, forced) in [("", false), ("0", false), ("1", true), ("yes", true)] {
        std::env::set_var(FORCE_PORTABLE_ENV, value);
        assert_eq!(cfg.force_portable(), forced, "{value:?}");
    }
    std::env::remove_var(FORCE_PORTABLE_ENV);
    assert!(!cfg.force_portable());
    let file = RuntimeConfig::from_toml_str("[device]\nforce_portable = true\n").unwrap();
    assert!(file.force_portable());
}
