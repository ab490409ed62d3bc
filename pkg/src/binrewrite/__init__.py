"""Static binary rewriting for ZAR-32 executables."""
