//! Exercise the C ABI exactly as an external binding would: through the
//! exported extern "C" functions and raw pointers.

use std::ffi::{CStr, CString};
use std::ptr;

use mufasa::config::{Overrides, RunConfig};
use mufasa_ffi::*;

fn prepare_run(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::load(None, &Overrides::default()).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg.seed = 11;
    cfg.synthetic.seed = 11;
    cfg.train.seed = 11;
    cfg.synthetic.num_genres = 3;
    cfg.synthetic.dim = 8;
    cfg.synthetic.modalities = 3;
    cfg.synthetic.items_per_genre = 5;
    cfg.synthetic.num_users = 20;
    cfg.synthetic.seq_len_min = 6;
    cfg.synthetic.seq_len_max = 12;
    cfg.model.dim = 8;
    cfg.model.modalities = 3;
    cfg.cf_epochs = 2;
    cfg.train.epochs_mfl = 2;
    cfg.train.epochs_sal = 2;
    cfg.train.batch_size = 8;
    mufasa::cli::cmd_gen_data(&cfg).unwrap();
    mufasa::cli::cmd_train(&cfg).unwrap();
    cfg
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mufasa_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(mufasa_version()) };
    assert!(!v.to_bytes().is_empty());
}

#[test]
fn load_rank_and_free_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_run(dir.path());

    let ckpt = CString::new(cfg.checkpoint_path().to_str().unwrap()).unwrap();
    let items = CString::new(cfg.items_path().to_str().unwrap()).unwrap();

    unsafe {
        let mut model: *mut MufasaModel = ptr::null_mut();
        assert_eq!(mufasa_model_load(ckpt.as_ptr(), &mut model), MufasaStatus::Ok);
        assert_eq!(mufasa_model_dim(model), 8);

        let mut catalog: *mut MufasaCatalog = ptr::null_mut();
        assert_eq!(mufasa_catalog_load(items.as_ptr(), &mut catalog), MufasaStatus::Ok);
        assert_eq!(mufasa_catalog_len(catalog), 15);

        // First two catalog items as context.
        let id0 = mufasa_catalog_item_id(catalog, 0);
        let id1 = mufasa_catalog_item_id(catalog, 1);
        assert!(!id0.is_null() && !id1.is_null());
        let context = [id0, id1];

        let mut emb = vec![0.0f64; 8];
        assert_eq!(
            mufasa_user_embedding(model, catalog, context.as_ptr(), 2, emb.as_mut_ptr(), 8),
            MufasaStatus::Ok
        );
        assert!(emb.iter().any(|v| *v != 0.0));

        let mut indices = vec![0usize; 5];
        let mut scores = vec![0.0f64; 5];
        let mut written = 0usize;
        assert_eq!(
            mufasa_rank_top_k(
                model,
                catalog,
                context.as_ptr(),
                2,
                5,
                indices.as_mut_ptr(),
                scores.as_mut_ptr(),
                &mut written,
            ),
            MufasaStatus::Ok
        );
        assert_eq!(written, 5);
        for w in scores.windows(2) {
            assert!(w[0] >= w[1], "scores not sorted: {scores:?}");
        }
        for &i in &indices {
            assert!(i < 15);
        }

        // The ranking agrees with the library path.
        let lib_model = mufasa::model::Model::load(&cfg.checkpoint_path()).unwrap();
        let lib_catalog = mufasa::data::io::load_catalog(&cfg.items_path()).unwrap();
        let ranker = mufasa::eval::Ranker::new(&lib_model, &lib_catalog).unwrap();
        let ranked = ranker.rank("t", &[0, 1]).unwrap();
        let want: Vec<usize> = ranked.ranked.iter().take(5).map(|(i, _)| *i).collect();
        assert_eq!(indices, want);

        mufasa_catalog_free(catalog);
        mufasa_model_free(model);
    }
}

#[test]
fn missing_checkpoint_reports_data_error() {
    let path = CString::new("/nonexistent/ckpt.json").unwrap();
    let mut model: *mut MufasaModel = ptr::null_mut();
    let status = unsafe { mufasa_model_load(path.as_ptr(), &mut model) };
    assert_eq!(status, MufasaStatus::DataError);
    assert!(model.is_null());
    assert!(last_error().contains("ckpt.json"), "{}", last_error());
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        let mut model: *mut MufasaModel = ptr::null_mut();
        assert_eq!(
            mufasa_model_load(ptr::null(), &mut model),
            MufasaStatus::NullArgument
        );
        assert_eq!(
            mufasa_rank_top_k(
                ptr::null(),
                ptr::null(),
                ptr::null(),
                0,
                5,
                ptr::null_mut(),
                ptr::null_mut(),
                ptr::null_mut(),
            ),
            MufasaStatus::NullArgument
        );
        // Freeing null is a no-op, not a crash.
        mufasa_model_free(ptr::null_mut());
        mufasa_catalog_free(ptr::null_mut());
    }
}

#[test]
fn unknown_context_id_reports_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_run(dir.path());
    let items = CString::new(cfg.items_path().to_str().unwrap()).unwrap();
    let ckpt = CString::new(cfg.checkpoint_path().to_str().unwrap()).unwrap();
    unsafe {
        let mut model: *mut MufasaModel = ptr::null_mut();
        let mut catalog: *mut MufasaCatalog = ptr::null_mut();
        assert_eq!(mufasa_model_load(ckpt.as_ptr(), &mut model), MufasaStatus::Ok);
        assert_eq!(mufasa_catalog_load(items.as_ptr(), &mut catalog), MufasaStatus::Ok);
        let bogus = CString::new("no_such_item").unwrap();
        let context = [bogus.as_ptr()];
        let mut emb = vec![0.0f64; 8];
        assert_eq!(
            mufasa_user_embedding(model, catalog, context.as_ptr(), 1, emb.as_mut_ptr(), 8),
            MufasaStatus::DataError
        );
        assert!(last_error().contains("no_such_item"));
        mufasa_catalog_free(catalog);
        mufasa_model_free(model);
    }
}

#[test]
fn small_buffer_reports_buffer_too_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepare_run(dir.path());
    let items = CString::new(cfg.items_path().to_str().unwrap()).unwrap();
    let ckpt = CString::new(cfg.checkpoint_path().to_str().unwrap()).unwrap();
    unsafe {
        let mut model: *mut MufasaModel = ptr::null_mut();
        let mut catalog: *mut MufasaCatalog = ptr::null_mut();
        mufasa_model_load(ckpt.as_ptr(), &mut model);
        mufasa_catalog_load(items.as_ptr(), &mut catalog);
        let id0 = mufasa_catalog_item_id(catalog, 0);
        let context = [id0];
        let mut emb = vec![0.0f64; 2];
        assert_eq!(
            mufasa_user_embedding(model, catalog, context.as_ptr(), 1, emb.as_mut_ptr(), 2),
            MufasaStatus::BufferTooSmall
        );
        mufasa_catalog_free(catalog);
        mufasa_model_free(model);
    }
}

#[test]
fn gradcheck_entry_point() {
    assert_eq!(mufasa_gradcheck(7, 1e-4), MufasaStatus::Ok);
    // An absurd tolerance forces the failure path.
    assert_eq!(mufasa_gradcheck(7, 1e-18), MufasaStatus::NumericError);
    assert!(last_error().contains("gradient"));
}

#[test]
fn generated_header_exists_and_names_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("mufasa.h");
    let text = std::fs::read_to_string(header).unwrap();
    for symbol in [
        "mufasa_version",
        "mufasa_last_error",
        "mufasa_model_load",
        "mufasa_model_free",
        "mufasa_catalog_load",
        "mufasa_rank_top_k",
        "mufasa_user_embedding",
        "MufasaStatus",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
