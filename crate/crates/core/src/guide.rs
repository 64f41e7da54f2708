//! Long-form guide chapters compiled as doctests (in progress).
