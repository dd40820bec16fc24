# spm_protocol test suite
