#include "fccdn/autodiff.hpp"

#include <sstream>
#include <unordered_set>

namespace fccdn {

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

namespace {
thread_local int g_no_grad_depth = 0;
}

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Var::Var(Tensor t, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(t);
  node_->requires_grad = requires_grad && grad_enabled();
}

Var Var::leaf(const ParamPtr& p) {
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = p->value;
  if (grad_enabled() && p->trainable) {
    v.node_->requires_grad = true;
    v.node_->param = p;
    v.node_->backprop = [](Node& n) { // leaf: push into the parameter's grad
      Tensor& g = n.param->grad;
      const Tensor& ng = n.grad;
      for (std::int64_t i = 0; i < ng.numel(); ++i) g.data[i] += ng.data[i];
    };
  }
  return v;
}

void Var::backward() const {
  if (!node_) throw std::runtime_error("backward() on empty Var");
  if (node_->value.numel() != 1) throw std::runtime_error("backward() requires a scalar root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for topological order.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* n;
    std::size_t next_child;
  };
  std::vector<Frame> stack;
  stack.push_back({node_.get(), 0});
  visited.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_child++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad.data[0] = 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (!n->grad_ready || !n->backprop) continue;
    n->backprop(*n);
  }
}

}  // namespace fccdn
