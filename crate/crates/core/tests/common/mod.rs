#![allow(dead_code)]

use std::sync::Arc;

use axum::Router;
use tokio::sync::oneshot;

use searchgym_core::synthetic::generate;
use searchgym_core::{Corpus, EmbedderConfig, PipelineConfig, SearchEngine, SearchService};

/// A router served on an ephemeral port from its own runtime thread.
pub struct Mock {
    pub url: String,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl Drop for Mock {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn_mock(router: Router) -> Mock {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .unwrap();
        })
    });
    Mock {
        url,
        stop: Some(tx),
        thread: Some(thread),
    }
}

pub fn synthetic_service(n_docs: usize, dim: usize, config: PipelineConfig) -> (Arc<Corpus>, SearchService) {
    let set = generate(n_docs, 0, 21);
    let corpus = Arc::new(set.corpus);
    let engine = SearchEngine::build(corpus.clone(), EmbedderConfig::hash(dim), config).unwrap();
    (corpus, SearchService::new(engine, 512))
}
