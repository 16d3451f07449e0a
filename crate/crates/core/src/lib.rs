pub mod algebraic;
pub mod cones;
pub mod deformation;
pub mod interval;
pub mod linalg;
pub mod nilmanifold;
pub mod pipeline;
pub mod planner;
