// LD_PRELOAD shim: records every outbound connect()/sendto() destination to
// the file named by BM_NETSHIM_LOG, then forwards to libc.
#include <arpa/inet.h>
#include <dlfcn.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace {

void record(const char* call, const sockaddr* addr) {
  const char* path = std::getenv("BM_NETSHIM_LOG");
  if (path == nullptr || addr == nullptr) return;
  char host[INET6_ADDRSTRLEN] = "?";
  int port = 0;
  const char* family = "other";
  if (addr->sa_family == AF_INET) {
    const auto* in = reinterpret_cast<const sockaddr_in*>(addr);
    inet_ntop(AF_INET, &in->sin_addr, host, sizeof host);
    port = ntohs(in->sin_port);
    family = "inet";
  } else if (addr->sa_family == AF_INET6) {
    const auto* in6 = reinterpret_cast<const sockaddr_in6*>(addr);
    inet_ntop(AF_INET6, &in6->sin6_addr, host, sizeof host);
    port = ntohs(in6->sin6_port);
    family = "inet6";
  } else if (addr->sa_family == AF_UNIX) {
    family = "unix";
    std::snprintf(host, sizeof host, "local");
  }
  char line[256];
  const int n = std::snprintf(line, sizeof line, "%s %s %s %d\n", call, family, host, port);
  const int fd = open(path, O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) return;
  if (n > 0) (void)!write(fd, line, static_cast<size_t>(n));
  close(fd);
}

}  // namespace

extern "C" int connect(int fd, const sockaddr* addr, socklen_t len) {
  using Fn = int (*)(int, const sockaddr*, socklen_t);
  static Fn real = reinterpret_cast<Fn>(dlsym(RTLD_NEXT, "connect"));
  record("connect", addr);
  return real(fd, addr, len);
}

extern "C" ssize_t sendto(int fd, const void* buf, size_t n, int flags, const sockaddr* addr, socklen_t len) {
  using Fn = ssize_t (*)(int, const void*, size_t, int, const sockaddr*, socklen_t);
  static Fn real = reinterpret_cast<Fn>(dlsym(RTLD_NEXT, "sendto"));
  if (addr != nullptr) record("sendto", addr);
  return real(fd, buf, n, flags, addr, len);
}
