// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace slot {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes that do not line up.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Malformed or incomplete checkpoint, tokenizer or dataset files.
class LoadError : public Error {
public:
    using Error::Error;
};

// Invalid user configuration (hyperparameters, CLI flags, extraction rules).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Sequence would exceed the model's position table.
class ContextOverflow : public Error {
public:
    using Error::Error;
};

// Fewer than two prompt tokens: there is no next-token target to score.
class PromptTooShort : public Error {
public:
    using Error::Error;
};

} // namespace slot
