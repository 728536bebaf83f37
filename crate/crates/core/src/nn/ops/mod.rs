pub(crate) mod attention;
pub(crate) mod conv;
mod elementwise;
pub(crate) mod loss;
mod mind;
mod pool;
mod resample;
