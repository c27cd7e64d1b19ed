#pragma once

#include <stdexcept>
#include <string>

namespace rged {

enum class ErrorKind {
    contract,
    dimension,
    numeric,
    degenerate_input,
    degenerate_direction,
    invalid_sigma,
    infeasible_edit,
    unresolved_target,
    vocabulary,
    grammar,
    dependency,
    data,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define RGED_DEFINE_ERROR(Name, Kind)                                              \
    class Name : public Error {                                                    \
    public:                                                                        \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}   \
    };

RGED_DEFINE_ERROR(ContractError, contract)
RGED_DEFINE_ERROR(DimensionError, dimension)
RGED_DEFINE_ERROR(NumericError, numeric)
RGED_DEFINE_ERROR(DegenerateInputError, degenerate_input)
RGED_DEFINE_ERROR(DegenerateDirectionError, degenerate_direction)
RGED_DEFINE_ERROR(InvalidSigmaError, invalid_sigma)
RGED_DEFINE_ERROR(InfeasibleEditError, infeasible_edit)
RGED_DEFINE_ERROR(UnresolvedTargetError, unresolved_target)
RGED_DEFINE_ERROR(VocabularyError, vocabulary)
RGED_DEFINE_ERROR(GrammarError, grammar)
RGED_DEFINE_ERROR(DependencyError, dependency)
RGED_DEFINE_ERROR(DataError, data)

#undef RGED_DEFINE_ERROR

// CLI exit status: 2 for contract/dependency problems, 3 for bad input data.
inline int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::infeasible_edit:
    case ErrorKind::unresolved_target:
    case ErrorKind::vocabulary:
    case ErrorKind::grammar:
    case ErrorKind::data:
        return 3;
    default:
        return 2;
    }
}

} // namespace rged
