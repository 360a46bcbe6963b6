use crate::ingest::PatientBundle;
use crate::model::MatchOutcome;
use crate::parallel::WorkerPool;
use crate::rules::RuleSet;

use super::classify_patient;

const CHUNK: usize = 4096;

/// Classifies a slice of bundles, preserving order.
pub fn classify_all(bundles: &[PatientBundle], rs: &RuleSet, workers: usize) -> Vec<MatchOutcome> {
    WorkerPool::new(workers).map(bundles, |b| classify_patient(b, rs))
}

/// Lazily classifies a patient-ordered bundle stream.
///
/// Bundles are pulled in chunks and each chunk is classified on `workers`
/// threads; output order always equals input order, so the result does not
/// depend on the worker count. An input error ends the stream after the
/// bundles read before it have been emitted.
pub fn classify_stream<I, E>(bundles: I, rs: &RuleSet, workers: usize) -> ClassifyStream<'_, I::IntoIter>
where
    I: IntoIterator<Item = Result<PatientBundle, E>>,
{
    ClassifyStream {
        input: bundles.into_iter(),
        rules: rs,
        pool: WorkerPool::new(workers),
        ready: Vec::new().into_iter(),
        pending_error: None,
        exhausted: false,
    }
}

pub struct ClassifyStream<'r, I: Iterator> {
    input: I,
    rules: &'r RuleSet,
    pool: WorkerPool,
    ready: std::vec::IntoIter<MatchOutcome>,
    pending_error: Option<I::Item>,
    exhausted: bool,
}

impl<I, E> Iterator for ClassifyStream<'_, I>
where
    I: Iterator<Item = Result<PatientBundle, E>>,
{
    type Item = Result<MatchOutcome, E>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(out) = self.ready.next() {
                return Some(Ok(out));
            }
            if let Some(Err(e)) = self.pending_error.take() {
                self.exhausted = true;
                return Some(Err(e));
            }
            if self.exhausted {
                return None;
            }
            let size = if self.pool.workers() > 1 { CHUNK } else { 1 };
            let mut chunk = Vec::with_capacity(size);
            while chunk.len() < size {
                match self.input.next() {
                    Some(Ok(b)) => chunk.push(b),
                    Some(err) => {
                        self.pending_error = Some(err);
                        break;
                    }
                    None => {
                        self.exhausted = true;
                        break;
                    }
                }
            }
            let rules = self.rules;
            self.ready = self.pool.map(&chunk, |b| classify_patient(b, rules)).into_iter();
        }
    }
}
