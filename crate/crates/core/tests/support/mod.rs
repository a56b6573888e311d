pub mod dsep_oracle;
