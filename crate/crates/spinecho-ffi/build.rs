fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();

    // cbindgen::Config is non-exhaustive, so field-by-field setup is the
    // supported construction style.
    #[allow(clippy::field_reassign_with_default)]
    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.include_guard = Some("SPINECHO_H".to_string());
    config.cpp_compat = true;
    config.documentation = true;
    config.enumeration.prefix_with_name = true;
    config.header = Some(
        "/* C interface to the spinecho pulsed-magnetic-resonance toolkit.\n\
         * Regenerated by the crate build script; do not edit by hand. */"
            .to_string(),
    );

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen header generation")
        .write_to_file(std::path::Path::new(&crate_dir).join("include/spinecho.h"));

    println!("cargo:rerun-if-changed=src/lib.rs");
}
